#pragma once

// Test-only oracles, kept independent of the library's evaluation paths:
// TT values by explicit path summation, moment matrices by Monte Carlo.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ttstream/ttstream.hpp"

namespace oracles {

using ttstream::IndexTuple;
using ttstream::Matrix;
using ttstream::ModelState;

/// TT element value as an explicit sum over all rank-index paths,
/// sum_{a_1..a_{D-1}} prod_d G^(d)(a_{d-1}, j_d, a_d).
inline double path_sum_value(const std::vector<Matrix>& slices) {
  struct Walker {
    const std::vector<Matrix>& slices;
    double walk(std::size_t d, Eigen::Index row) const {
      if (d == slices.size()) return 1.0;
      double total = 0.0;
      for (Eigen::Index a = 0; a < slices[d].cols(); ++a) {
        total += slices[d](row, a) * walk(d + 1, a);
      }
      return total;
    }
  };
  return Walker{slices}.walk(0, 0);
}

inline double path_sum_value(const ttstream::GroundTruth& gt,
                             const IndexTuple& index) {
  std::vector<Matrix> slices;
  for (std::size_t d = 0; d < gt.cores.size(); ++d) {
    slices.push_back(gt.cores[d][static_cast<std::size_t>(index[d])]);
  }
  return path_sum_value(slices);
}

inline double path_sum_value(const ModelState& state, const IndexTuple& index) {
  std::vector<Matrix> slices;
  for (std::size_t d = 0; d < state.cores.size(); ++d) {
    slices.push_back(state.cores[d].mean[static_cast<std::size_t>(index[d])]);
  }
  return path_sum_value(slices);
}

/// Monte-Carlo estimate of E[G_j (x) G_j] for one core slice.
inline Matrix mc_slice_second_moment(const ttstream::CorePosterior& core,
                                     std::int64_t j, std::size_t samples,
                                     std::uint64_t seed) {
  const Matrix& mean = core.mean[static_cast<std::size_t>(j)];
  const Matrix sdev = core.variance[static_cast<std::size_t>(j)].cwiseSqrt();
  ttstream::detail::Rng rng(seed);
  Matrix draw(mean.rows(), mean.cols());
  Matrix acc = Matrix::Zero(mean.rows() * mean.rows(), mean.cols() * mean.cols());
  for (std::size_t s = 0; s < samples; ++s) {
    for (Eigen::Index k = 0; k < mean.rows(); ++k) {
      for (Eigen::Index l = 0; l < mean.cols(); ++l) {
        draw(k, l) = mean(k, l) + sdev(k, l) * rng.gauss();
      }
    }
    acc += ttstream::kron(draw, draw);
  }
  return acc / static_cast<double>(samples);
}

/// Monte-Carlo estimates of the left environment products for one
/// observation index: averages of prod_{i<d} M_i and prod_{i<d} M_i (x) M_i
/// over slices sampled from the posterior.
struct McEnv {
  Eigen::RowVectorXd e;
  Eigen::RowVectorXd b;
};

inline McEnv mc_left_env(const ModelState& state, const IndexTuple& index,
                         std::size_t mode, std::size_t samples,
                         std::uint64_t seed) {
  ttstream::detail::Rng rng(seed);
  const auto rank = state.ranks.r[mode];
  McEnv out;
  out.e = Eigen::RowVectorXd::Zero(rank);
  out.b = Eigen::RowVectorXd::Zero(rank * rank);
  Matrix draw;
  for (std::size_t s = 0; s < samples; ++s) {
    Eigen::RowVectorXd chain = Eigen::RowVectorXd::Ones(1);
    Eigen::RowVectorXd chain2 = Eigen::RowVectorXd::Ones(1);
    for (std::size_t i = 0; i < mode; ++i) {
      const auto j = static_cast<std::size_t>(index[i]);
      const Matrix& mean = state.cores[i].mean[j];
      const Matrix sdev = state.cores[i].variance[j].cwiseSqrt();
      draw.resize(mean.rows(), mean.cols());
      for (Eigen::Index k = 0; k < mean.rows(); ++k) {
        for (Eigen::Index l = 0; l < mean.cols(); ++l) {
          draw(k, l) = mean(k, l) + sdev(k, l) * rng.gauss();
        }
      }
      chain = chain * draw;
      chain2 = chain2 * ttstream::kron(draw, draw);
    }
    out.e += chain;
    out.b += chain2;
  }
  out.e /= static_cast<double>(samples);
  out.b /= static_cast<double>(samples);
  return out;
}

inline McEnv mc_right_env(const ModelState& state, const IndexTuple& index,
                          std::size_t mode, std::size_t samples,
                          std::uint64_t seed) {
  ttstream::detail::Rng rng(seed);
  const std::size_t order = state.shape.order();
  const auto rank = state.ranks.r[mode + 1];
  McEnv out;
  out.e = Eigen::RowVectorXd::Zero(rank);
  out.b = Eigen::RowVectorXd::Zero(rank * rank);
  Matrix draw;
  for (std::size_t s = 0; s < samples; ++s) {
    Eigen::VectorXd chain = Eigen::VectorXd::Ones(1);
    Eigen::VectorXd chain2 = Eigen::VectorXd::Ones(1);
    for (std::size_t i = order; i-- > mode + 1;) {
      const auto j = static_cast<std::size_t>(index[i]);
      const Matrix& mean = state.cores[i].mean[j];
      const Matrix sdev = state.cores[i].variance[j].cwiseSqrt();
      draw.resize(mean.rows(), mean.cols());
      for (Eigen::Index k = 0; k < mean.rows(); ++k) {
        for (Eigen::Index l = 0; l < mean.cols(); ++l) {
          draw(k, l) = mean(k, l) + sdev(k, l) * rng.gauss();
        }
      }
      chain = draw * chain;
      chain2 = ttstream::kron(draw, draw) * chain2;
    }
    out.e += chain.transpose();
    out.b += chain2.transpose();
  }
  out.e /= static_cast<double>(samples);
  out.b /= static_cast<double>(samples);
  return out;
}

/// Random posterior state with uniform(0,1) means and variances drawn from
/// [var_lo, var_hi]; the workhorse input for moment-identity checks.
inline ModelState random_state(const ttstream::TensorShape& shape,
                               const ttstream::TTRanks& ranks,
                               std::uint64_t seed, double var_lo,
                               double var_hi) {
  ttstream::PriorConfig prior;
  prior.init_seed = seed;
  ModelState state = ttstream::init_state(shape, ranks, prior);
  ttstream::detail::Rng rng(seed ^ 0x5EED);
  for (auto& core : state.cores) {
    for (auto& slice : core.variance) {
      for (Eigen::Index k = 0; k < slice.rows(); ++k) {
        for (Eigen::Index l = 0; l < slice.cols(); ++l) {
          slice(k, l) = var_lo + (var_hi - var_lo) * rng.uniform01();
        }
      }
    }
  }
  return state;
}

/// Fresh scratch directory under the system temp root.
inline std::filesystem::path make_temp_dir(const std::string& tag) {
  static std::mt19937_64 gen(std::random_device{}());
  const auto dir = std::filesystem::temp_directory_path() /
                   ("ttstream_" + tag + "_" + std::to_string(gen()));
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace oracles
