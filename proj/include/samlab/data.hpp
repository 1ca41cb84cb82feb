#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "samlab/common.hpp"
#include "samlab/rng.hpp"

namespace samlab {

struct DatasetSpec {
  enum class Kind { blobs, spirals, idx_files };
  Kind kind = Kind::blobs;
  // blobs
  int64_t classes = 2;
  int64_t dim = 2;
  int64_t n = 100;
  double noise = 1.0;
  uint64_t seed = 0;
  // idx_files
  std::string images_path;
  std::string labels_path;
  int64_t take_n = 0;  // 0 = whole file
  // common
  double split = 0.8;
};

struct Dataset {
  int64_t n = 0;
  int64_t dim = 0;
  int64_t classes = 0;
  std::vector<double> X;  // row-major [n, dim]
  std::vector<int> y;
};

struct DatasetPair {
  Dataset train;
  Dataset test;
  // train-split standardization statistics, kept for inversion
  std::vector<double> feat_mean;
  std::vector<double> feat_std;
};

namespace detail {

inline void standardize(DatasetPair& pair) {
  const int64_t dim = pair.train.dim;
  pair.feat_mean.assign(static_cast<size_t>(dim), 0.0);
  pair.feat_std.assign(static_cast<size_t>(dim), 0.0);
  for (int64_t i = 0; i < pair.train.n; ++i)
    for (int64_t j = 0; j < dim; ++j)
      pair.feat_mean[static_cast<size_t>(j)] += pair.train.X[static_cast<size_t>(i * dim + j)];
  for (double& m : pair.feat_mean) m /= static_cast<double>(pair.train.n);
  for (int64_t i = 0; i < pair.train.n; ++i)
    for (int64_t j = 0; j < dim; ++j) {
      const double d =
          pair.train.X[static_cast<size_t>(i * dim + j)] - pair.feat_mean[static_cast<size_t>(j)];
      pair.feat_std[static_cast<size_t>(j)] += d * d;
    }
  for (double& s : pair.feat_std) {
    s = std::sqrt(s / static_cast<double>(pair.train.n));
    if (s < 1e-12) s = 1.0;  // constant feature
  }
  for (Dataset* ds : {&pair.train, &pair.test}) {
    for (int64_t i = 0; i < ds->n; ++i)
      for (int64_t j = 0; j < dim; ++j) {
        auto idx = static_cast<size_t>(i * dim + j);
        ds->X[idx] = (ds->X[idx] - pair.feat_mean[static_cast<size_t>(j)]) /
                     pair.feat_std[static_cast<size_t>(j)];
      }
  }
}

inline DatasetPair split_shuffled(Dataset full, double split, Rng* shuffle_rng) {
  if (split <= 0.0 || split >= 1.0) throw ConfigError("data: split fraction must be in (0,1)");
  std::vector<int64_t> order(static_cast<size_t>(full.n));
  std::iota(order.begin(), order.end(), int64_t{0});
  if (shuffle_rng) shuffle_rng->shuffle(order);
  const auto n_train = static_cast<int64_t>(std::llround(split * static_cast<double>(full.n)));
  if (n_train < 1 || n_train >= full.n) throw ConfigError("data: split leaves an empty subset");
  DatasetPair pair;
  for (int64_t i = 0; i < full.n; ++i) {
    Dataset& dst = i < n_train ? pair.train : pair.test;
    const int64_t src = order[static_cast<size_t>(i)];
    dst.X.insert(dst.X.end(), full.X.begin() + src * full.dim, full.X.begin() + (src + 1) * full.dim);
    dst.y.push_back(full.y[static_cast<size_t>(src)]);
  }
  for (Dataset* ds : {&pair.train, &pair.test}) {
    ds->dim = full.dim;
    ds->classes = full.classes;
    ds->n = static_cast<int64_t>(ds->y.size());
  }
  standardize(pair);
  return pair;
}

inline Dataset make_blobs(const DatasetSpec& spec) {
  if (spec.classes < 2 || spec.dim < 1 || spec.n < 2) throw ConfigError("blobs: bad shape parameters");
  Rng rng(spec.seed);
  std::vector<double> centers(static_cast<size_t>(spec.classes * spec.dim));
  for (double& c : centers) c = rng.uniform(-2.0, 2.0);
  Dataset ds;
  ds.n = spec.n;
  ds.dim = spec.dim;
  ds.classes = spec.classes;
  ds.X.resize(static_cast<size_t>(spec.n * spec.dim));
  ds.y.resize(static_cast<size_t>(spec.n));
  for (int64_t i = 0; i < spec.n; ++i) {
    const auto cls = static_cast<int>(i % spec.classes);
    ds.y[static_cast<size_t>(i)] = cls;
    for (int64_t j = 0; j < spec.dim; ++j) {
      ds.X[static_cast<size_t>(i * spec.dim + j)] =
          centers[static_cast<size_t>(cls * spec.dim + j)] + spec.noise * rng.normal();
    }
  }
  return ds;
}

inline Dataset make_spirals(const DatasetSpec& spec) {
  if (spec.n < 2) throw ConfigError("spirals: need n >= 2");
  Rng rng(spec.seed);
  Dataset ds;
  ds.n = spec.n;
  ds.dim = 2;
  ds.classes = 2;
  ds.X.resize(static_cast<size_t>(spec.n) * 2);
  ds.y.resize(static_cast<size_t>(spec.n));
  for (int64_t i = 0; i < spec.n; ++i) {
    const auto cls = static_cast<int>(i % 2);
    const double t = rng.uniform(0.5, 3.0) * std::numbers::pi;
    const double r = t / (3.0 * std::numbers::pi);
    const double phase = cls == 0 ? 0.0 : std::numbers::pi;
    ds.y[static_cast<size_t>(i)] = cls;
    ds.X[static_cast<size_t>(i * 2 + 0)] = r * std::cos(t + phase) + spec.noise * rng.normal();
    ds.X[static_cast<size_t>(i * 2 + 1)] = r * std::sin(t + phase) + spec.noise * rng.normal();
  }
  return ds;
}

// IDX: [0x00 0x00 dtype ndim][ndim u32 big-endian dims][payload]
struct IdxArray {
  std::vector<int64_t> dims;
  std::vector<uint8_t> data;
};

inline IdxArray parse_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("idx: cannot open '" + path + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4) throw ConfigError("idx: '" + path + "' truncated header at offset 0");
  if (bytes[0] != 0 || bytes[1] != 0) {
    throw ConfigError("idx: '" + path + "' bad magic at offset " + std::string(bytes[0] != 0 ? "0" : "1"));
  }
  if (bytes[2] != 0x08) {
    throw ConfigError("idx: '" + path + "' unsupported dtype at offset 2 (only 0x08 ubyte)");
  }
  const int ndim = bytes[3];
  if (ndim < 1 || ndim > 3) throw ConfigError("idx: '" + path + "' unsupported rank at offset 3");
  const size_t header = 4 + 4 * static_cast<size_t>(ndim);
  if (bytes.size() < header) {
    throw ConfigError("idx: '" + path + "' truncated dims at offset " + std::to_string(bytes.size()));
  }
  IdxArray arr;
  int64_t total = 1;
  for (int d = 0; d < ndim; ++d) {
    const size_t off = 4 + 4 * static_cast<size_t>(d);
    const int64_t v = (static_cast<int64_t>(bytes[off]) << 24) | (static_cast<int64_t>(bytes[off + 1]) << 16) |
                      (static_cast<int64_t>(bytes[off + 2]) << 8) | static_cast<int64_t>(bytes[off + 3]);
    arr.dims.push_back(v);
    total *= v;
  }
  if (static_cast<int64_t>(bytes.size() - header) < total) {
    throw ConfigError("idx: '" + path + "' payload truncated at offset " + std::to_string(bytes.size()));
  }
  arr.data.assign(bytes.begin() + static_cast<int64_t>(header),
                  bytes.begin() + static_cast<int64_t>(header) + total);
  return arr;
}

inline Dataset make_idx(const DatasetSpec& spec) {
  IdxArray images = parse_idx(spec.images_path);
  IdxArray labels = parse_idx(spec.labels_path);
  if (images.dims.size() != 3) throw ConfigError("idx: images file must be rank 3 [n,h,w]");
  if (labels.dims.size() != 1) throw ConfigError("idx: labels file must be rank 1 [n]");
  if (images.dims[0] != labels.dims[0]) throw ConfigError("idx: image/label counts differ");
  const int64_t available = images.dims[0];
  const int64_t take = spec.take_n > 0 ? spec.take_n : available;
  if (take > available) {
    throw ConfigError("idx: take_n " + std::to_string(take) + " exceeds file count " +
                      std::to_string(available));
  }
  Dataset ds;
  ds.n = take;
  ds.dim = images.dims[1] * images.dims[2];
  ds.X.resize(static_cast<size_t>(ds.n * ds.dim));
  ds.y.resize(static_cast<size_t>(ds.n));
  int max_label = 0;
  for (int64_t i = 0; i < take; ++i) {
    for (int64_t j = 0; j < ds.dim; ++j) {
      ds.X[static_cast<size_t>(i * ds.dim + j)] =
          static_cast<double>(images.data[static_cast<size_t>(i * ds.dim + j)]);
    }
    ds.y[static_cast<size_t>(i)] = labels.data[static_cast<size_t>(i)];
    max_label = std::max(max_label, ds.y[static_cast<size_t>(i)]);
  }
  ds.classes = max_label + 1;
  return ds;
}

}  // namespace detail

/// Deterministic generation/slicing, split, then standardization with
/// train-split statistics. Synthetic sets are seed-shuffled before the split;
/// IDX files keep file order.
inline DatasetPair load_dataset(const DatasetSpec& spec) {
  switch (spec.kind) {
    case DatasetSpec::Kind::blobs: {
      Dataset full = detail::make_blobs(spec);
      Rng rng(spec.seed ^ 0x5EED5EEDull);
      return detail::split_shuffled(std::move(full), spec.split, &rng);
    }
    case DatasetSpec::Kind::spirals: {
      Dataset full = detail::make_spirals(spec);
      Rng rng(spec.seed ^ 0x5EED5EEDull);
      return detail::split_shuffled(std::move(full), spec.split, &rng);
    }
    case DatasetSpec::Kind::idx_files: {
      Dataset full = detail::make_idx(spec);
      return detail::split_shuffled(std::move(full), spec.split, nullptr);
    }
  }
  throw ConfigError("data: unknown dataset kind");
}

}  // namespace samlab
