#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "ttstream/tensor_data.hpp"
#include "ttstream/tt_posterior.hpp"

namespace ttstream {

/// Left/right environment products around one mode for one observation:
/// chains of posterior-mean slices (e) and of slice second moments (b).
/// Empty products are the 1x1 identity.
struct EnvMoments {
  Eigen::RowVectorXd e_left;   // 1 x r_{d-1}
  Eigen::VectorXd e_right;     // r_d x 1
  Eigen::RowVectorXd b_left;   // 1 x r_{d-1}^2
  Eigen::VectorXd b_right;     // r_d^2 x 1
};

/// Placement of the noise-precision update inside a sweep. PerCore runs it
/// after every core update (the reference placement); PerSweep defers it to
/// once per sweep; Frozen disables it so E[tau] stays fixed.
enum class NoiseUpdate { PerCore, PerSweep, Frozen };

struct EngineConfig {
  int max_inner_iters = 100;
  double inner_tolerance = 1e-4;
  NoiseUpdate noise_update = NoiseUpdate::PerCore;
  // sweeps always visit cores in ascending mode order

  void validate() const {
    if (max_inner_iters < 1) {
      throw std::invalid_argument("max_inner_iters must be >= 1");
    }
    if (inner_tolerance < 0.0) {
      throw std::invalid_argument("inner_tolerance must be >= 0");
    }
  }
};

inline EnvMoments compute_envs(const ModelState& state, const IndexTuple& index,
                               std::size_t mode) {
  check_index(state.shape, index);
  const std::size_t order = state.shape.order();
  if (mode >= order) throw std::invalid_argument("mode out of range");

  EnvMoments env;
  env.e_left = Eigen::RowVectorXd::Ones(1);
  env.b_left = Eigen::RowVectorXd::Ones(1);
  for (std::size_t i = 0; i < mode; ++i) {
    const auto j = static_cast<std::size_t>(index[i]);
    env.e_left = env.e_left * state.cores[i].mean[j];
    env.b_left = env.b_left * slice_second_moment(state.cores[i], index[i]);
  }
  env.e_right = Eigen::VectorXd::Ones(1);
  env.b_right = Eigen::VectorXd::Ones(1);
  for (std::size_t i = order; i-- > mode + 1;) {
    const auto j = static_cast<std::size_t>(index[i]);
    env.e_right = state.cores[i].mean[j] * env.e_right;
    env.b_right = slice_second_moment(state.cores[i], index[i]) * env.b_right;
  }
  return env;
}

/// Precision form of the Gaussian variance update. Written as
/// prev / (1 + tau*s*prev), which equals (prev^-1 + tau*s)^-1 and cannot
/// exceed prev in floating point.
inline double update_core_element_variance(double prev_variance,
                                           double expected_tau,
                                           double moment_sum) {
  if (!(prev_variance > 0.0)) {
    throw std::invalid_argument("prev_variance must be > 0");
  }
  if (!(expected_tau > 0.0)) {
    throw std::invalid_argument("expected_tau must be > 0");
  }
  if (moment_sum < 0.0) {
    throw std::invalid_argument("moment_sum must be >= 0");
  }
  return prev_variance / (1.0 + expected_tau * moment_sum * prev_variance);
}

/// Posterior-mean update for core element (k, j_d, l) given the batch
/// entries whose mode-d index is j_d. Environment products and the sibling
/// means in the cross term come from the current state (coordinate ascent);
/// the stream prior (previous-batch posterior) supplies the frozen
/// mean/variance terms.
inline double update_core_element_mean(
    const ModelState& state, const CorePosterior& prior_core, std::size_t d,
    Eigen::Index k, std::int64_t j_d, Eigen::Index l,
    const ObservationBatch& batch, const std::vector<std::size_t>& group,
    double new_variance, double expected_tau) {
  const auto j = static_cast<std::size_t>(j_d);
  const Matrix& mu0 = prior_core.mean[j];
  const Matrix& nu0 = prior_core.variance[j];
  const Matrix& mu = state.cores[d].mean[j];
  const Eigen::Index rp = mu0.rows();
  const Eigen::Index rn = mu0.cols();

  double acc = 0.0;
  for (auto pos : group) {
    const auto& obs = batch.entries[pos];
    const EnvMoments env = compute_envs(state, obs.index, d);
    double cross = 0.0;
    for (Eigen::Index kp = 0; kp < rp; ++kp) {
      for (Eigen::Index lp = 0; lp < rn; ++lp) {
        if (kp == k && lp == l) continue;  // the element's own term is excluded
        cross += env.b_left(k * rp + kp) * env.b_right(l * rn + lp) * mu(kp, lp);
      }
    }
    acc += obs.value * env.e_left(k) * env.e_right(l) - cross;
  }
  // ratio form: an untouched element (new_variance == prior variance)
  // reproduces the prior mean exactly
  return new_variance / nu0(k, l) * mu0(k, l) +
         new_variance * expected_tau * acc;
}

namespace detail {

constexpr double kVarianceFloor = 1e-300;

// Hand-rolled kernels for the sweep's hot loops. The matrices involved are
// tiny (r x r up to r^2 x r^2), where library dispatch would dominate the
// arithmetic. Size parameters accept either std::size_t or
// std::integral_constant; the rank dispatcher below instantiates the
// compile-time variants so the small loops unroll and vectorize.

// y = M x, column-major M of size rows x cols
template <typename RowsT, typename ColsT>
inline void matvec_s(RowsT rows_t, ColsT cols_t, const double* __restrict m,
                     const double* __restrict x, double* __restrict y) {
  const std::size_t rows = rows_t;
  const std::size_t cols = cols_t;
  for (std::size_t a = 0; a < rows; ++a) y[a] = 0.0;
  for (std::size_t b = 0; b < cols; ++b) {
    const double xb = x[b];
    const double* col = m + b * rows;
    for (std::size_t a = 0; a < rows; ++a) y[a] += col[a] * xb;
  }
}

// y = x^T M
template <typename RowsT, typename ColsT>
inline void vecmat_s(RowsT rows_t, ColsT cols_t, const double* __restrict x,
                     const double* __restrict m, double* __restrict y) {
  const std::size_t rows = rows_t;
  const std::size_t cols = cols_t;
  for (std::size_t b = 0; b < cols; ++b) {
    const double* col = m + b * rows;
    double acc = 0.0;
    for (std::size_t a = 0; a < rows; ++a) acc += x[a] * col[a];
    y[b] = acc;
  }
}

template <typename LenT>
inline double dot_s(LenT len_t, const double* __restrict x,
                    const double* __restrict y) {
  const std::size_t len = len_t;
  double acc = 0.0;
  for (std::size_t i = 0; i < len; ++i) acc += x[i] * y[i];
  return acc;
}

inline double dot(const double* x, const double* y, std::size_t len) {
  return dot_s(len, x, y);
}

constexpr std::size_t kMaxSpecializedRank = 6;

// keeps compile-time sizes compile-time when squaring
template <std::size_t N>
constexpr auto square(std::integral_constant<std::size_t, N>) {
  return std::integral_constant<std::size_t, N * N>{};
}
constexpr std::size_t square(std::size_t v) { return v * v; }

template <std::size_t RP, typename Fn>
inline bool dispatch_rank_second(std::size_t rn, Fn&& fn) {
  switch (rn) {
    case 1: fn(std::integral_constant<std::size_t, RP>{}, std::integral_constant<std::size_t, 1>{}); return true;
    case 2: fn(std::integral_constant<std::size_t, RP>{}, std::integral_constant<std::size_t, 2>{}); return true;
    case 3: fn(std::integral_constant<std::size_t, RP>{}, std::integral_constant<std::size_t, 3>{}); return true;
    case 4: fn(std::integral_constant<std::size_t, RP>{}, std::integral_constant<std::size_t, 4>{}); return true;
    case 5: fn(std::integral_constant<std::size_t, RP>{}, std::integral_constant<std::size_t, 5>{}); return true;
    case 6: fn(std::integral_constant<std::size_t, RP>{}, std::integral_constant<std::size_t, 6>{}); return true;
    default: return false;
  }
}

/// Runs fn with compile-time rank sizes when both are at most
/// kMaxSpecializedRank, else reports failure so that the caller falls back
/// to the runtime-sized path.
template <typename Fn>
inline bool dispatch_rank_pair(std::size_t rp, std::size_t rn, Fn&& fn) {
  if (rp > kMaxSpecializedRank || rn > kMaxSpecializedRank) return false;
  switch (rp) {
    case 1: return dispatch_rank_second<1>(rn, fn);
    case 2: return dispatch_rank_second<2>(rn, fn);
    case 3: return dispatch_rank_second<3>(rn, fn);
    case 4: return dispatch_rank_second<4>(rn, fn);
    case 5: return dispatch_rank_second<5>(rn, fn);
    case 6: return dispatch_rank_second<6>(rn, fn);
    default: return false;
  }
}

/// Expected sum of squared residuals over a batch, expanded per observation
/// as (x - mean)^2 + (second moment - mean^2).
inline double expected_residual_sq(const ModelState& state,
                                   const ObservationBatch& batch) {
  double acc = 0.0;
  for (const auto& obs : batch.entries) {
    const PredictiveMoments pm = predictive_moments(state, obs.index);
    const double resid = obs.value - pm.mean;
    acc += resid * resid + (pm.second_moment - pm.mean * pm.mean);
  }
  return acc;
}

}  // namespace detail

/// Gamma update for the noise precision: shape grows by half the batch
/// cardinality, rate by half the expected squared residual under the
/// current core posteriors. state.noise supplies the previous-batch values.
inline NoisePosterior update_noise(const ModelState& state,
                                   const ObservationBatch& batch) {
  if (!(batch.shape == state.shape)) {
    throw std::invalid_argument("batch shape does not match model");
  }
  const double inc = detail::expected_residual_sq(state, batch);
  if (inc < -1e-9) {
    throw std::runtime_error("noise update: negative expected residual sum");
  }
  return NoisePosterior{
      state.noise.alpha + static_cast<double>(batch.size()) / 2.0,
      state.noise.beta + 0.5 * std::max(inc, 0.0)};
}

/// One streaming step: absorbs a batch into the posterior by coordinate
/// sweeps over the cores. The previous-batch posterior is frozen for the
/// whole inner loop and serves as the prior in every element update; all
/// other quantities (environments, sibling means, E[tau]) follow the
/// latest values as the sweep advances.
inline ModelState process_batch(ModelState state, const ObservationBatch& batch,
                                const EngineConfig& config) {
  config.validate();
  if (!(batch.shape == state.shape)) {
    throw std::invalid_argument("batch shape does not match model");
  }
  const std::size_t order = state.shape.order();
  const std::size_t n = batch.size();
  const auto& r = state.ranks.r;

  const std::vector<CorePosterior> prior_cores = state.cores;
  const NoisePosterior prior_noise = state.noise;
  const double half_count = static_cast<double>(n) / 2.0;

  std::vector<std::vector<std::vector<std::size_t>>> groups(order);
  for (std::size_t d = 0; d < order; ++d) {
    groups[d] = group_by_mode_index(batch, d);
  }

  Eigen::Index max_r = 1;
  for (auto v : r) max_r = std::max<Eigen::Index>(max_r, v);
  const Eigen::Index max_r2 = max_r * max_r;

  // Flat per-observation chain buffers. Suffix slot (i,d) holds the product
  // over modes strictly after d; left slots grow as the sweep advances.
  std::vector<double> e_suf(n * order * static_cast<std::size_t>(max_r));
  std::vector<double> b_suf(n * order * static_cast<std::size_t>(max_r2));
  std::vector<double> e_left(n * static_cast<std::size_t>(max_r));
  std::vector<double> b_left(n * static_cast<std::size_t>(max_r2));
  auto es_ptr = [&](std::size_t i, std::size_t d) {
    return e_suf.data() + (i * order + d) * static_cast<std::size_t>(max_r);
  };
  auto bs_ptr = [&](std::size_t i, std::size_t d) {
    return b_suf.data() + (i * order + d) * static_cast<std::size_t>(max_r2);
  };
  auto el_ptr = [&](std::size_t i) {
    return e_left.data() + i * static_cast<std::size_t>(max_r);
  };
  auto bl_ptr = [&](std::size_t i) {
    return b_left.data() + i * static_cast<std::size_t>(max_r2);
  };

  // contiguous copies of indices and values for the hot loops
  std::vector<std::size_t> idx_flat(n * order);
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < order; ++d) {
      idx_flat[i * order + d] =
          static_cast<std::size_t>(batch.entries[i].index[d]);
    }
    values[i] = batch.entries[i].value;
  }

  // slice second moments, refreshed whenever the owning core changes
  std::vector<std::vector<Matrix>> secmom(order);

  std::vector<double> moment_acc(static_cast<std::size_t>(max_r2 * max_r2));
  std::vector<double> data_acc(static_cast<std::size_t>(max_r * max_r));
  std::vector<double> scratch(static_cast<std::size_t>(max_r2));

  const auto apply_noise = [&](std::size_t d) {
    // expected squared residual with left chains folded through core d
    double inc = 0.0;
    const auto width = static_cast<std::size_t>(r[d + 1]);
    for (std::size_t i = 0; i < n; ++i) {
      const double pred = detail::dot(el_ptr(i), es_ptr(i, d), width);
      const double sec = detail::dot(bl_ptr(i), bs_ptr(i, d), width * width);
      const double resid = values[i] - pred;
      inc += resid * resid + (sec - pred * pred);
    }
    if (inc < -1e-9) {
      throw std::runtime_error("noise update: negative expected residual sum");
    }
    state.noise.alpha = prior_noise.alpha + half_count;
    state.noise.beta = prior_noise.beta + 0.5 * std::max(inc, 0.0);
  };

  for (int sweep = 0; sweep < config.max_inner_iters; ++sweep) {
    for (std::size_t d = 0; d < order; ++d) {
      auto& sm = secmom[d];
      sm.resize(static_cast<std::size_t>(state.shape.dims[d]));
      for (std::size_t j = 0; j < sm.size(); ++j) {
        detail::slice_second_moment_into(state.cores[d].mean[j],
                                         state.cores[d].variance[j], sm[j]);
      }
    }

    // suffix chains, level d from the already-computed level d+1
    for (std::size_t i = 0; i < n; ++i) {
      es_ptr(i, order - 1)[0] = 1.0;
      bs_ptr(i, order - 1)[0] = 1.0;
      el_ptr(i)[0] = 1.0;
      bl_ptr(i)[0] = 1.0;
    }
    for (std::size_t d = order - 1; d-- > 0;) {
      const auto suffix_pass = [&](auto rows, auto cols) {
        const auto rows2 = detail::square(rows);
        const auto cols2 = detail::square(cols);
        const std::vector<Matrix>& means = state.cores[d + 1].mean;
        const std::vector<Matrix>& moments = secmom[d + 1];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t j = idx_flat[i * order + d + 1];
          detail::matvec_s(rows, cols, means[j].data(), es_ptr(i, d + 1),
                           es_ptr(i, d));
          detail::matvec_s(rows2, cols2, moments[j].data(), bs_ptr(i, d + 1),
                           bs_ptr(i, d));
        }
      };
      const auto rows = static_cast<std::size_t>(r[d + 1]);
      const auto cols = static_cast<std::size_t>(r[d + 2]);
      if (!detail::dispatch_rank_pair(rows, cols, suffix_pass)) {
        suffix_pass(rows, cols);
      }
    }

    double max_delta = 0.0;
    for (std::size_t d = 0; d < order; ++d) {
      const double etau = state.noise.expected_precision();

      const auto update_core = [&](auto rp, auto rn) {
        const auto rp2 = detail::square(rp);
        const auto rn2 = detail::square(rn);
        double* acc_t = moment_acc.data();
        double* acc_x = data_acc.data();
        for (std::size_t j = 0; j < groups[d].size(); ++j) {
          const auto& group = groups[d][j];
          if (group.empty()) continue;  // untouched slice keeps its posterior

          for (std::size_t m = 0; m < rp2 * rn2; ++m) acc_t[m] = 0.0;
          for (std::size_t m = 0; m < rp * rn; ++m) acc_x[m] = 0.0;
          for (auto pos : group) {
            const double* __restrict bl = bl_ptr(pos);
            const double* __restrict br = bs_ptr(pos, d);
            for (std::size_t q = 0; q < rn2; ++q) {
              const double w = br[q];
              double* __restrict col = acc_t + q * rp2;
              for (std::size_t p = 0; p < rp2; ++p) col[p] += w * bl[p];
            }
            const double* __restrict el = el_ptr(pos);
            const double* __restrict er = es_ptr(pos, d);
            const double x = values[pos];
            for (std::size_t l = 0; l < rn; ++l) {
              const double w = x * er[l];
              double* __restrict col = acc_x + l * rp;
              for (std::size_t k = 0; k < rp; ++k) col[k] += w * el[k];
            }
          }

          const Matrix& mu0 = prior_cores[d].mean[j];
          const Matrix& nu0 = prior_cores[d].variance[j];
          Matrix& mu = state.cores[d].mean[j];
          Matrix& nu = state.cores[d].variance[j];
          const double* mu_data = mu.data();
          for (std::size_t k = 0; k < rp; ++k) {
            for (std::size_t l = 0; l < rn; ++l) {
              const auto ki = static_cast<Eigen::Index>(k);
              const auto li = static_cast<Eigen::Index>(l);
              const double diag =
                  std::max(acc_t[(l * rn + l) * rp2 + k * rp + k], 0.0);
              double new_var =
                  update_core_element_variance(nu0(ki, li), etau, diag);
              if (new_var < detail::kVarianceFloor) {
                new_var = detail::kVarianceFloor;
                ++state.variance_clamps;
              }
              // cross term over sibling elements of this slice, at their
              // latest values; the (k,l) term cancels out of the full sum
              double cross = -diag * mu(ki, li);
              for (std::size_t lp = 0; lp < rn; ++lp) {
                const double* t_col = acc_t + (l * rn + lp) * rp2 + k * rp;
                const double* mu_col = mu_data + lp * rp;
                for (std::size_t kp = 0; kp < rp; ++kp) {
                  cross += t_col[kp] * mu_col[kp];
                }
              }
              const double new_mean =
                  new_var / nu0(ki, li) * mu0(ki, li) +
                  new_var * etau * (acc_x[l * rp + k] - cross);
              max_delta = std::max(max_delta, std::abs(new_mean - mu(ki, li)));
              mu(ki, li) = new_mean;
              nu(ki, li) = new_var;
            }
          }
          detail::slice_second_moment_into(state.cores[d].mean[j],
                                           state.cores[d].variance[j],
                                           secmom[d][j]);
        }

        // fold the refreshed core into every observation's left chains
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t j = idx_flat[i * order + d];
          detail::vecmat_s(rp, rn, el_ptr(i), state.cores[d].mean[j].data(),
                           scratch.data());
          for (std::size_t m = 0; m < rn; ++m) el_ptr(i)[m] = scratch[m];
          detail::vecmat_s(rp2, rn2, bl_ptr(i), secmom[d][j].data(),
                           scratch.data());
          for (std::size_t m = 0; m < rn2; ++m) bl_ptr(i)[m] = scratch[m];
        }
      };

      const auto rp = static_cast<std::size_t>(r[d]);
      const auto rn = static_cast<std::size_t>(r[d + 1]);
      if (!detail::dispatch_rank_pair(rp, rn, update_core)) {
        update_core(rp, rn);
      }

      if (config.noise_update == NoiseUpdate::PerCore) apply_noise(d);
    }
    if (config.noise_update == NoiseUpdate::PerSweep) apply_noise(order - 1);

    if (max_delta < config.inner_tolerance) break;
  }

  state.batches_seen += 1;
  return state;
}

/// Feeds batches to process_batch strictly in order, invoking the callback
/// after each one. Earlier batches are never revisited.
template <typename Callback>
ModelState run_stream(ModelState state,
                      const std::vector<ObservationBatch>& batches,
                      const EngineConfig& config, Callback&& per_batch) {
  for (std::size_t t = 0; t < batches.size(); ++t) {
    if (!(batches[t].shape == state.shape)) {
      throw std::invalid_argument("batch " + std::to_string(t) +
                                  ": shape does not match model");
    }
    state = process_batch(std::move(state), batches[t], config);
    per_batch(t, static_cast<const ModelState&>(state));
  }
  return state;
}

inline ModelState run_stream(ModelState state,
                             const std::vector<ObservationBatch>& batches,
                             const EngineConfig& config) {
  return run_stream(std::move(state), batches, config,
                    [](std::size_t, const ModelState&) {});
}

}  // namespace ttstream
