#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ttstream/rng.hpp"
#include "ttstream/synthetic.hpp"
#include "ttstream/tensor_data.hpp"
#include "ttstream/tt_posterior.hpp"

namespace ttstream {

struct ErrorLogEntry {
  std::size_t batch_index = 0;
  double rel_error = 0.0;
  double seconds = 0.0;
};

/// Per-batch running test error, the plot-ready output of a streaming run.
struct ErrorLog {
  std::vector<ErrorLogEntry> per_batch;

  double final_error() const {
    if (per_batch.empty()) throw std::runtime_error("empty error log");
    return per_batch.back().rel_error;
  }
};

/// ||predicted - truth||_2 / ||truth||_2
inline double relative_error(const std::vector<double>& predicted,
                             const std::vector<double>& truth) {
  if (predicted.size() != truth.size()) {
    throw std::invalid_argument("relative_error: length mismatch");
  }
  if (truth.empty()) throw std::invalid_argument("relative_error: empty input");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double diff = predicted[i] - truth[i];
    num += diff * diff;
    den += truth[i] * truth[i];
  }
  if (den == 0.0) throw std::invalid_argument("relative_error: zero-norm truth");
  return std::sqrt(num) / std::sqrt(den);
}

/// Relative error of posterior-mean predictions against the observed test
/// values.
inline double evaluate_on_test(const ModelState& state,
                               const ObservationBatch& test) {
  if (test.empty()) throw std::invalid_argument("empty test set");
  std::vector<double> predicted, truth;
  predicted.reserve(test.size());
  truth.reserve(test.size());
  for (const auto& obs : test.entries) {
    predicted.push_back(predict_mean(state, obs.index));
    truth.push_back(obs.value);
  }
  return relative_error(predicted, truth);
}

/// Synthetic variant: compares against the noiseless true tensor at the test
/// indices instead of the noisy observed values.
inline double evaluate_on_test(const ModelState& state,
                               const ObservationBatch& test,
                               const GroundTruth& gt) {
  if (test.empty()) throw std::invalid_argument("empty test set");
  std::vector<double> predicted, truth;
  predicted.reserve(test.size());
  truth.reserve(test.size());
  for (const auto& obs : test.entries) {
    predicted.push_back(predict_mean(state, obs.index));
    truth.push_back(true_value(gt, obs.index));
  }
  return relative_error(predicted, truth);
}

struct McEstimate {
  double second_moment = 0.0;
  double std_error = 0.0;
};

/// Monte-Carlo estimate of E[(product of core slices)^2] at one index,
/// sampling every core element independently from its posterior Gaussian.
inline McEstimate mc_second_moment_oracle(const ModelState& state,
                                          const IndexTuple& index,
                                          std::size_t num_samples,
                                          std::uint64_t seed) {
  check_index(state.shape, index);
  if (num_samples < 1) throw std::invalid_argument("num_samples must be >= 1");
  const std::size_t order = state.shape.order();

  std::vector<Matrix> mean(order), sdev(order), sample(order);
  for (std::size_t d = 0; d < order; ++d) {
    const auto j = static_cast<std::size_t>(index[d]);
    mean[d] = state.cores[d].mean[j];
    sdev[d] = state.cores[d].variance[j].cwiseSqrt();
    sample[d] = mean[d];
  }
  Eigen::Index max_r = 1;
  for (auto v : state.ranks.r) max_r = std::max<Eigen::Index>(max_r, v);
  Eigen::RowVectorXd acc(max_r), next(max_r);

  detail::Rng rng(seed);
  double sum_sq = 0.0;
  double sum_4th = 0.0;
  for (std::size_t s = 0; s < num_samples; ++s) {
    acc.head(1)(0) = 1.0;
    Eigen::Index width = 1;
    for (std::size_t d = 0; d < order; ++d) {
      Matrix& g = sample[d];
      for (Eigen::Index k = 0; k < g.rows(); ++k) {
        for (Eigen::Index l = 0; l < g.cols(); ++l) {
          g(k, l) = mean[d](k, l) + sdev[d](k, l) * rng.gauss();
        }
      }
      const Eigen::Index out = g.cols();
      next.head(out).noalias() = acc.head(width) * g;
      acc.head(out) = next.head(out);
      width = out;
    }
    const double y = acc(0);
    const double y2 = y * y;
    sum_sq += y2;
    sum_4th += y2 * y2;
  }
  const double n = static_cast<double>(num_samples);
  McEstimate est;
  est.second_moment = sum_sq / n;
  const double var_sq =
      std::max(sum_4th / n - est.second_moment * est.second_moment, 0.0);
  est.std_error = std::sqrt(var_sq / n);
  return est;
}

inline void write_error_log_csv(const std::string& path, const ErrorLog& log,
                                bool wall_clock) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write error log: " + path);
  out << "batch,rel_error,seconds\n";
  char buf[64];
  for (const auto& entry : log.per_batch) {
    out << entry.batch_index << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", entry.rel_error);
    out << buf << ',';
    // wall time is inherently nondeterministic; runs default to a zero
    // column so identical configs produce byte-identical logs
    std::snprintf(buf, sizeof(buf), "%.6f", wall_clock ? entry.seconds : 0.0);
    out << buf << '\n';
  }
  if (!out) throw std::runtime_error("error log write failed: " + path);
}

inline ErrorLog read_error_log_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open error log: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "batch,rel_error,seconds") {
    throw std::runtime_error("bad error log header in " + path);
  }
  ErrorLog log;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ErrorLogEntry entry;
    char comma1 = 0, comma2 = 0;
    std::istringstream fields(line);
    if (!(fields >> entry.batch_index >> comma1 >> entry.rel_error >> comma2 >>
          entry.seconds) ||
        comma1 != ',' || comma2 != ',') {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": malformed error log row");
    }
    if (!log.per_batch.empty() &&
        entry.batch_index <= log.per_batch.back().batch_index) {
      throw std::runtime_error(path + ": batch indices not increasing");
    }
    log.per_batch.push_back(entry);
  }
  return log;
}

}  // namespace ttstream
