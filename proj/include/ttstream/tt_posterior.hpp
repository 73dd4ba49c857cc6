#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ttstream/rng.hpp"
#include "ttstream/tensor_data.hpp"

namespace ttstream {

using Matrix = Eigen::MatrixXd;

/// Internal ranks (r_0,...,r_D) linking adjacent cores, r_0 = r_D = 1.
struct TTRanks {
  std::vector<std::int64_t> r;

  static TTRanks uniform(std::size_t order, std::int64_t rank) {
    TTRanks ranks;
    ranks.r.assign(order + 1, rank);
    ranks.r.front() = 1;
    ranks.r.back() = 1;
    return ranks;
  }

  void validate(std::size_t order) const {
    if (r.size() != order + 1) {
      throw std::invalid_argument("TT-ranks must have length D+1");
    }
    if (r.front() != 1 || r.back() != 1) {
      throw std::invalid_argument("boundary TT-ranks must be 1");
    }
    for (auto v : r) {
      if (v < 1) throw std::invalid_argument("TT-ranks must be positive");
    }
  }
};

/// Elementwise Gaussian posterior over one TT-core: slice j holds the
/// r_{d-1} x r_d mean and variance matrices of core elements (:, j, :).
struct CorePosterior {
  std::vector<Matrix> mean;
  std::vector<Matrix> variance;

  std::size_t num_slices() const { return mean.size(); }
  Eigen::Index rank_left() const { return mean.empty() ? 0 : mean[0].rows(); }
  Eigen::Index rank_right() const { return mean.empty() ? 0 : mean[0].cols(); }
};

/// Gamma posterior over the observation-noise precision.
struct NoisePosterior {
  double alpha = 1e-3;
  double beta = 1e-3;

  double expected_precision() const { return alpha / beta; }
};

struct PriorConfig {
  double prior_variance = 1.0;
  double alpha0 = 1e-3;
  double beta0 = 1e-3;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (!(prior_variance > 0.0 && alpha0 > 0.0 && beta0 > 0.0)) {
      throw std::invalid_argument("prior parameters must be positive");
    }
  }
};

/// Full posterior state: one CorePosterior per mode plus the noise posterior.
struct ModelState {
  TensorShape shape;
  TTRanks ranks;
  std::vector<CorePosterior> cores;
  NoisePosterior noise;
  std::uint64_t batches_seen = 0;
  std::uint64_t variance_clamps = 0;
};

/// Core means i.i.d. uniform(0,1), variances equal to the prior variance
/// (1 by default), noise at (alpha0, beta0).
inline ModelState init_state(const TensorShape& shape, const TTRanks& ranks,
                             const PriorConfig& prior) {
  shape.validate();
  ranks.validate(shape.order());
  prior.validate();

  ModelState state;
  state.shape = shape;
  state.ranks = ranks;
  state.noise = NoisePosterior{prior.alpha0, prior.beta0};

  detail::Rng rng(prior.init_seed);
  for (std::size_t d = 0; d < shape.order(); ++d) {
    const auto rows = ranks.r[d];
    const auto cols = ranks.r[d + 1];
    CorePosterior core;
    core.mean.resize(static_cast<std::size_t>(shape.dims[d]));
    core.variance.resize(static_cast<std::size_t>(shape.dims[d]));
    for (auto& slice : core.mean) {
      slice.resize(rows, cols);
      for (Eigen::Index k = 0; k < rows; ++k) {
        for (Eigen::Index l = 0; l < cols; ++l) slice(k, l) = rng.uniform01();
      }
    }
    for (auto& slice : core.variance) {
      slice = Matrix::Constant(rows, cols, prior.prior_variance);
    }
    state.cores.push_back(std::move(core));
  }
  return state;
}

inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

/// Chain product of posterior-mean slices at the given index; scalar by the
/// boundary ranks.
inline double predict_mean(const ModelState& state, const IndexTuple& index) {
  check_index(state.shape, index);
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Ones(1);
  for (std::size_t d = 0; d < state.cores.size(); ++d) {
    acc = acc * state.cores[d].mean[static_cast<std::size_t>(index[d])];
  }
  return acc(0);
}

namespace detail {

/// Allocation-free slice second moment, filled in place (column-major).
inline void slice_second_moment_into(const Matrix& m, const Matrix& v,
                                     Matrix& out) {
  const auto rp = static_cast<std::size_t>(m.rows());
  const auto rn = static_cast<std::size_t>(m.cols());
  out.resize(static_cast<Eigen::Index>(rp * rp),
             static_cast<Eigen::Index>(rn * rn));
  double* o = out.data();
  const double* md = m.data();
  for (std::size_t l = 0; l < rn; ++l) {
    for (std::size_t lp = 0; lp < rn; ++lp) {
      double* col = o + (l * rn + lp) * rp * rp;
      const double* ml = md + l * rp;
      const double* mlp = md + lp * rp;
      for (std::size_t k = 0; k < rp; ++k) {
        const double w = ml[k];
        double* block = col + k * rp;
        for (std::size_t kp = 0; kp < rp; ++kp) block[kp] = w * mlp[kp];
      }
    }
  }
  for (std::size_t k = 0; k < rp; ++k) {
    for (std::size_t l = 0; l < rn; ++l) {
      o[(l * rn + l) * rp * rp + k * rp + k] +=
          v(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l));
    }
  }
}

}  // namespace detail

/// E[G_{j} (x) G_{j}] = mean (x) mean + V_j, where V_j carries each element's
/// variance at position (k,l) of its (k,l) block.
inline Matrix slice_second_moment(const CorePosterior& core, std::int64_t j) {
  if (j < 0 || static_cast<std::size_t>(j) >= core.num_slices()) {
    throw std::invalid_argument("slice index out of range");
  }
  Matrix out;
  detail::slice_second_moment_into(core.mean[static_cast<std::size_t>(j)],
                                   core.variance[static_cast<std::size_t>(j)],
                                   out);
  return out;
}

struct PredictiveMoments {
  double mean = 0.0;
  double second_moment = 0.0;
};

/// Exact first and second moments of the TT product at one index under the
/// elementwise-independent posterior.
inline PredictiveMoments predictive_moments(const ModelState& state,
                                            const IndexTuple& index) {
  check_index(state.shape, index);
  Eigen::RowVectorXd acc_m = Eigen::RowVectorXd::Ones(1);
  Eigen::RowVectorXd acc_s = Eigen::RowVectorXd::Ones(1);
  for (std::size_t d = 0; d < state.cores.size(); ++d) {
    const auto j = index[d];
    acc_m = acc_m * state.cores[d].mean[static_cast<std::size_t>(j)];
    acc_s = acc_s * slice_second_moment(state.cores[d], j);
  }
  return PredictiveMoments{acc_m(0), acc_s(0)};
}

// ---------------------------------------------------------------------------
// Checkpoints: little-endian binary, self-describing header, full precision.

namespace detail {

constexpr char kCkptMagic[8] = {'T', 'T', 'S', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCkptVersion = 1;

inline void put_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
inline void put_scalar(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(buf, buf + sizeof(T));
  }
  put_bytes(out, buf, sizeof(T));
}

template <typename T>
inline T get_scalar(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(buf, buf + sizeof(T));
  }
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

}  // namespace detail

inline void checkpoint_save(const ModelState& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);

  detail::put_bytes(out, detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::put_scalar<std::uint32_t>(out, detail::kCkptVersion);
  detail::put_scalar<std::uint64_t>(out, state.shape.order());
  for (auto d : state.shape.dims) detail::put_scalar<std::int64_t>(out, d);
  for (auto r : state.ranks.r) detail::put_scalar<std::int64_t>(out, r);
  detail::put_scalar<std::uint64_t>(out, state.batches_seen);
  detail::put_scalar<std::uint64_t>(out, state.variance_clamps);

  for (const auto& core : state.cores) {
    for (const auto& slice : core.mean) {
      for (Eigen::Index k = 0; k < slice.rows(); ++k) {
        for (Eigen::Index l = 0; l < slice.cols(); ++l) {
          detail::put_scalar<double>(out, slice(k, l));
        }
      }
    }
    for (const auto& slice : core.variance) {
      for (Eigen::Index k = 0; k < slice.rows(); ++k) {
        for (Eigen::Index l = 0; l < slice.cols(); ++l) {
          detail::put_scalar<double>(out, slice(k, l));
        }
      }
    }
  }
  detail::put_scalar<double>(out, state.noise.alpha);
  detail::put_scalar<double>(out, state.noise.beta);
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

inline ModelState checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  const auto version = detail::get_scalar<std::uint32_t>(in);
  if (version != detail::kCkptVersion) {
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  }

  ModelState state;
  const auto order = detail::get_scalar<std::uint64_t>(in);
  if (order == 0 || order > 64) {
    throw std::runtime_error("checkpoint declares invalid tensor order");
  }
  state.shape.dims.resize(order);
  for (auto& d : state.shape.dims) d = detail::get_scalar<std::int64_t>(in);
  state.ranks.r.resize(order + 1);
  for (auto& r : state.ranks.r) r = detail::get_scalar<std::int64_t>(in);
  try {
    state.shape.validate();
    state.ranks.validate(order);
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("corrupt checkpoint header: ") +
                             e.what());
  }
  state.batches_seen = detail::get_scalar<std::uint64_t>(in);
  state.variance_clamps = detail::get_scalar<std::uint64_t>(in);

  for (std::size_t d = 0; d < order; ++d) {
    CorePosterior core;
    const auto rows = state.ranks.r[d];
    const auto cols = state.ranks.r[d + 1];
    core.mean.resize(static_cast<std::size_t>(state.shape.dims[d]));
    core.variance.resize(static_cast<std::size_t>(state.shape.dims[d]));
    for (auto& slice : core.mean) {
      slice.resize(rows, cols);
      for (Eigen::Index k = 0; k < rows; ++k) {
        for (Eigen::Index l = 0; l < cols; ++l) {
          slice(k, l) = detail::get_scalar<double>(in);
        }
      }
    }
    for (auto& slice : core.variance) {
      slice.resize(rows, cols);
      for (Eigen::Index k = 0; k < rows; ++k) {
        for (Eigen::Index l = 0; l < cols; ++l) {
          slice(k, l) = detail::get_scalar<double>(in);
          if (!(slice(k, l) > 0.0)) {
            throw std::runtime_error("corrupt checkpoint: variance <= 0");
          }
        }
      }
    }
    state.cores.push_back(std::move(core));
  }
  state.noise.alpha = detail::get_scalar<double>(in);
  state.noise.beta = detail::get_scalar<double>(in);
  if (!(state.noise.alpha > 0.0 && state.noise.beta > 0.0)) {
    throw std::runtime_error("corrupt checkpoint: Gamma parameters <= 0");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error("corrupt checkpoint: trailing bytes");
  }
  return state;
}

}  // namespace ttstream
