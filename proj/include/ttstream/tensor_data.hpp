#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ttstream/rng.hpp"

namespace ttstream {

/// Mode lengths N_1..N_D of a D-th order tensor.
struct TensorShape {
  std::vector<std::int64_t> dims;

  std::size_t order() const { return dims.size(); }

  std::int64_t num_elements() const {
    std::int64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  void validate() const {
    if (dims.empty()) throw std::invalid_argument("tensor order must be >= 1");
    for (auto d : dims) {
      if (d < 1) throw std::invalid_argument("every mode length must be >= 1");
    }
  }

  bool operator==(const TensorShape& o) const { return dims == o.dims; }
};

/// Zero-based mode indices (j_1,...,j_D). On disk indices are one-based and
/// converted at the file boundary.
using IndexTuple = std::vector<std::int64_t>;

inline bool index_valid(const TensorShape& shape, const IndexTuple& index) {
  if (index.size() != shape.order()) return false;
  for (std::size_t d = 0; d < index.size(); ++d) {
    if (index[d] < 0 || index[d] >= shape.dims[d]) return false;
  }
  return true;
}

inline void check_index(const TensorShape& shape, const IndexTuple& index) {
  if (!index_valid(shape, index)) {
    throw std::invalid_argument("index out of range for tensor shape");
  }
}

struct Observation {
  IndexTuple index;
  double value = 0.0;
};

/// One set of observed elements; duplicates are kept as repeated measurements.
struct ObservationBatch {
  TensorShape shape;
  std::vector<Observation> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

struct SplitDataset {
  ObservationBatch train;
  ObservationBatch test;
};

/// Reads whitespace-separated COO text: D one-based indices then one value
/// per line. Lines starting with '#' and blank lines are skipped.
inline ObservationBatch load_coo(const std::string& path,
                                 const TensorShape& shape) {
  shape.validate();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open COO file: " + path);

  ObservationBatch batch;
  batch.shape = shape;
  const std::size_t order = shape.order();

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;

    std::istringstream fields(line);
    Observation obs;
    obs.index.resize(order);
    for (std::size_t d = 0; d < order; ++d) {
      std::int64_t one_based = 0;
      if (!(fields >> one_based)) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                 ": expected " + std::to_string(order) +
                                 " indices and a value");
      }
      obs.index[d] = one_based - 1;
    }
    if (!(fields >> obs.value)) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": missing or malformed value");
    }
    std::string trailing;
    if (fields >> trailing) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": trailing fields after value");
    }
    if (!index_valid(shape, obs.index)) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": index out of range");
    }
    if (!std::isfinite(obs.value)) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": value is not finite");
    }
    batch.entries.push_back(std::move(obs));
  }
  return batch;
}

/// Writes COO text with one-based indices; %.17g preserves doubles exactly.
inline void save_coo(const std::string& path, const ObservationBatch& batch) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write COO file: " + path);
  char buf[64];
  for (const auto& obs : batch.entries) {
    for (auto c : obs.index) out << (c + 1) << ' ';
    std::snprintf(buf, sizeof(buf), "%.17g", obs.value);
    out << buf << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

/// Uniform random subset of round(test_fraction * n) entries goes to test,
/// the rest to train; original entry order is preserved on both sides.
inline SplitDataset split_train_test(const ObservationBatch& batch,
                                     double test_fraction,
                                     std::uint64_t seed) {
  if (batch.empty()) throw std::invalid_argument("cannot split an empty batch");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("test_fraction must lie in (0,1)");
  }
  const std::size_t n = batch.size();
  const auto n_test = static_cast<std::size_t>(
      std::llround(test_fraction * static_cast<double>(n)));

  std::vector<std::size_t> positions(n);
  std::iota(positions.begin(), positions.end(), 0);
  detail::Rng rng(seed);
  rng.shuffle(positions);

  std::vector<char> is_test(n, 0);
  for (std::size_t i = 0; i < n_test; ++i) is_test[positions[i]] = 1;

  SplitDataset split;
  split.train.shape = batch.shape;
  split.test.shape = batch.shape;
  for (std::size_t i = 0; i < n; ++i) {
    (is_test[i] ? split.test : split.train).entries.push_back(batch.entries[i]);
  }
  return split;
}

/// Random permutation by seed, then chunks of batch_size; the final chunk
/// may be short.
inline std::vector<ObservationBatch> partition_stream(
    const ObservationBatch& batch, std::size_t batch_size,
    std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");

  std::vector<std::size_t> positions(batch.size());
  std::iota(positions.begin(), positions.end(), 0);
  detail::Rng rng(seed);
  rng.shuffle(positions);

  std::vector<ObservationBatch> chunks;
  for (std::size_t start = 0; start < positions.size(); start += batch_size) {
    ObservationBatch chunk;
    chunk.shape = batch.shape;
    const std::size_t stop = std::min(start + batch_size, positions.size());
    for (std::size_t i = start; i < stop; ++i) {
      chunk.entries.push_back(batch.entries[positions[i]]);
    }
    chunks.push_back(std::move(chunk));
  }
  return chunks;
}

/// Partition of entry positions by the mode-d coordinate: result[j] lists the
/// positions whose d-th index equals j (empty for unobserved j).
inline std::vector<std::vector<std::size_t>> group_by_mode_index(
    const ObservationBatch& batch, std::size_t mode) {
  if (mode >= batch.shape.order()) {
    throw std::invalid_argument("mode out of range");
  }
  std::vector<std::vector<std::size_t>> groups(
      static_cast<std::size_t>(batch.shape.dims[mode]));
  for (std::size_t i = 0; i < batch.entries.size(); ++i) {
    groups[static_cast<std::size_t>(batch.entries[i].index[mode])].push_back(i);
  }
  return groups;
}

}  // namespace ttstream
