#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "ttstream/rng.hpp"
#include "ttstream/tensor_data.hpp"
#include "ttstream/tt_posterior.hpp"

namespace ttstream {

/// Deterministic TT-format tensor used as synthetic ground truth.
struct GroundTruth {
  TensorShape shape;
  TTRanks ranks;
  std::vector<std::vector<Matrix>> cores;  // cores[d][j] is r_{d-1} x r_d
};

inline GroundTruth sample_ground_truth(const TensorShape& shape,
                                       const TTRanks& ranks,
                                       std::uint64_t seed) {
  shape.validate();
  ranks.validate(shape.order());

  GroundTruth gt;
  gt.shape = shape;
  gt.ranks = ranks;
  detail::Rng rng(seed);
  for (std::size_t d = 0; d < shape.order(); ++d) {
    std::vector<Matrix> slices(static_cast<std::size_t>(shape.dims[d]));
    for (auto& slice : slices) {
      slice.resize(ranks.r[d], ranks.r[d + 1]);
      for (Eigen::Index k = 0; k < slice.rows(); ++k) {
        for (Eigen::Index l = 0; l < slice.cols(); ++l) {
          slice(k, l) = rng.uniform01();
        }
      }
    }
    gt.cores.push_back(std::move(slices));
  }
  return gt;
}

inline double true_value(const GroundTruth& gt, const IndexTuple& index) {
  check_index(gt.shape, index);
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Ones(1);
  for (std::size_t d = 0; d < gt.cores.size(); ++d) {
    acc = acc * gt.cores[d][static_cast<std::size_t>(index[d])];
  }
  return acc(0);
}

namespace detail {

inline IndexTuple decode_linear_index(const TensorShape& shape,
                                      std::int64_t linear) {
  IndexTuple index(shape.order());
  for (std::size_t d = shape.order(); d-- > 0;) {
    index[d] = linear % shape.dims[d];
    linear /= shape.dims[d];
  }
  return index;
}

}  // namespace detail

/// Population variance of all tensor elements, by two-pass streaming
/// enumeration through the TT structure (the dense tensor is never stored).
inline double tensor_variance(const GroundTruth& gt) {
  const std::int64_t total = gt.shape.num_elements();
  double sum = 0.0;
  for (std::int64_t i = 0; i < total; ++i) {
    sum += true_value(gt, detail::decode_linear_index(gt.shape, i));
  }
  const double mean = sum / static_cast<double>(total);
  double sq = 0.0;
  for (std::int64_t i = 0; i < total; ++i) {
    const double dev = true_value(gt, detail::decode_linear_index(gt.shape, i)) - mean;
    sq += dev * dev;
  }
  return sq / static_cast<double>(total);
}

/// Noise level derived from a signal-to-noise ratio in decibels:
/// sigma2 = var(tensor) / 10^(snr_db/10).
struct NoiseSpec {
  double snr_db = 0.0;
  double sigma2 = 0.0;
};

inline NoiseSpec make_noise_spec(const GroundTruth& gt, double snr_db) {
  NoiseSpec spec;
  spec.snr_db = snr_db;
  spec.sigma2 = tensor_variance(gt) / std::pow(10.0, snr_db / 10.0);
  return spec;
}

/// Draws round(fraction * total) distinct indices uniformly at random and
/// observes the true value plus Gaussian noise at each. Entries come out
/// sorted by linear index.
inline ObservationBatch corrupt_and_observe(const GroundTruth& gt,
                                            double snr_db,
                                            double observe_fraction,
                                            std::uint64_t seed) {
  if (!(observe_fraction > 0.0 && observe_fraction <= 1.0)) {
    throw std::invalid_argument("observe_fraction must lie in (0,1]");
  }
  const std::int64_t total = gt.shape.num_elements();
  const auto count = static_cast<std::int64_t>(
      std::llround(observe_fraction * static_cast<double>(total)));

  detail::Rng rng(seed);
  std::vector<std::int64_t> chosen;
  chosen.reserve(static_cast<std::size_t>(count));
  if (total <= (std::int64_t{1} << 25)) {
    std::vector<std::int64_t> all(static_cast<std::size_t>(total));
    std::iota(all.begin(), all.end(), 0);
    // partial Fisher-Yates: only the first `count` slots are needed
    for (std::int64_t i = 0; i < count; ++i) {
      const auto j = i + static_cast<std::int64_t>(
                             rng.below(static_cast<std::uint64_t>(total - i)));
      std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
      chosen.push_back(all[static_cast<std::size_t>(i)]);
    }
  } else {
    std::unordered_set<std::int64_t> seen;
    while (static_cast<std::int64_t>(chosen.size()) < count) {
      const auto candidate =
          static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(total)));
      if (seen.insert(candidate).second) chosen.push_back(candidate);
    }
  }
  std::sort(chosen.begin(), chosen.end());

  const NoiseSpec noise = make_noise_spec(gt, snr_db);
  const double sigma = std::sqrt(noise.sigma2);

  ObservationBatch batch;
  batch.shape = gt.shape;
  batch.entries.reserve(chosen.size());
  for (auto linear : chosen) {
    Observation obs;
    obs.index = detail::decode_linear_index(gt.shape, linear);
    obs.value = true_value(gt, obs.index) + sigma * rng.gauss();
    batch.entries.push_back(std::move(obs));
  }
  return batch;
}

/// Provenance sidecar for generated datasets; enough to regenerate the
/// ground truth (dims, ranks, seed) and to document the noise level.
struct DatasetMeta {
  std::vector<std::int64_t> dims;
  std::vector<std::int64_t> ranks;
  double snr_db = 0.0;
  double sigma2 = 0.0;
  double observe_fraction = 0.0;
  std::uint64_t seed = 0;
  std::int64_t count = 0;
};

inline void save_metadata(const std::string& path, const DatasetMeta& meta) {
  nlohmann::json j;
  j["dims"] = meta.dims;
  j["ranks"] = meta.ranks;
  j["snr_db"] = meta.snr_db;
  j["sigma2"] = meta.sigma2;
  j["observe_fraction"] = meta.observe_fraction;
  j["seed"] = meta.seed;
  j["count"] = meta.count;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write metadata: " + path);
  out << j.dump(2) << '\n';
}

inline DatasetMeta load_metadata(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metadata: " + path);
  nlohmann::json j;
  in >> j;
  DatasetMeta meta;
  meta.dims = j.at("dims").get<std::vector<std::int64_t>>();
  meta.ranks = j.at("ranks").get<std::vector<std::int64_t>>();
  meta.snr_db = j.at("snr_db").get<double>();
  meta.sigma2 = j.value("sigma2", 0.0);
  meta.observe_fraction = j.at("observe_fraction").get<double>();
  meta.seed = j.at("seed").get<std::uint64_t>();
  meta.count = j.value("count", std::int64_t{0});
  return meta;
}

inline GroundTruth ground_truth_from_meta(const DatasetMeta& meta) {
  TensorShape shape{meta.dims};
  TTRanks ranks;
  ranks.r = meta.ranks;
  return sample_ground_truth(shape, ranks, meta.seed);
}

}  // namespace ttstream
