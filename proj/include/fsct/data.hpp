#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fsct/rng.hpp"
#include "fsct/tensor.hpp"

namespace fsct {

/// Physical layout of one sample: either a flat feature vector or a
/// channels x height x width image.
struct SampleDims {
  std::size_t features = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  bool is_image() const { return channels > 0; }
  std::size_t numel() const { return is_image() ? channels * height * width : features; }

  Shape batch_shape(std::size_t count) const {
    return is_image() ? Shape{count, channels, height, width} : Shape{count, features};
  }

  bool operator==(const SampleDims&) const = default;
};

struct Category {
  std::string name;
  std::vector<std::vector<double>> samples;
};

struct SplitDataset {
  SampleDims dims;
  std::vector<Category> train;
  std::vector<Category> val;
  std::vector<Category> test;
};

/// Categories must not repeat within or across splits.
inline void validate_splits(const SplitDataset& ds) {
  std::vector<std::string> seen;
  auto check = [&](const std::vector<Category>& pool, const char* split) {
    for (const Category& c : pool) {
      for (const std::string& name : seen)
        if (name == c.name)
          throw std::invalid_argument("dataset splits overlap: category '" + c.name +
                                      "' appears twice (second time in " + split + ")");
      seen.push_back(c.name);
    }
  };
  check(ds.train, "train");
  check(ds.val, "val");
  check(ds.test, "test");
}

/// One few-shot task. Support samples are grouped way-major (way 0 shots
/// first), queries likewise; a query's label is its way index.
struct Episode {
  std::size_t ways = 0;
  std::size_t shots = 0;
  std::size_t queries_per_cat = 0;
  Tensor support;                          // (ways*shots) x sample dims
  Tensor query;                            // (ways*queries_per_cat) x sample dims
  std::vector<std::size_t> query_labels;   // way index per query row
  std::vector<std::size_t> category_ids;   // pool indices of the drawn categories

  std::size_t num_queries() const { return query_labels.size(); }
};

/// Mirrors an image's columns. No-op for flat feature vectors.
inline void hflip_inplace(std::vector<double>& sample, const SampleDims& dims) {
  if (!dims.is_image()) return;
  for (std::size_t c = 0; c < dims.channels; ++c)
    for (std::size_t y = 0; y < dims.height; ++y) {
      double* row = sample.data() + (c * dims.height + y) * dims.width;
      for (std::size_t x = 0; x < dims.width / 2; ++x)
        std::swap(row[x], row[dims.width - 1 - x]);
    }
}

/// Draws an n-way k-shot episode: n categories uniformly without
/// replacement, then k + qpc samples per category without replacement, the
/// first k forming the support set. Fully determined by the rng state.
inline Episode sample_episode(const std::vector<Category>& pool, const SampleDims& dims,
                              std::size_t ways, std::size_t shots, std::size_t qpc, Rng& rng,
                              bool augment_hflip = false) {
  if (pool.size() < ways)
    throw std::invalid_argument("sample_episode: pool has " + std::to_string(pool.size()) +
                                " categories, need " + std::to_string(ways));
  const std::size_t need = shots + qpc;
  for (const Category& c : pool)
    if (c.samples.size() < need)
      throw std::invalid_argument("sample_episode: category '" + c.name + "' has " +
                                  std::to_string(c.samples.size()) + " samples, need " +
                                  std::to_string(need));

  Episode ep;
  ep.ways = ways;
  ep.shots = shots;
  ep.queries_per_cat = qpc;
  ep.category_ids = rng.choose(pool.size(), ways);
  ep.support = Tensor::zeros(dims.batch_shape(ways * shots));
  ep.query = Tensor::zeros(dims.batch_shape(ways * qpc));
  ep.query_labels.resize(ways * qpc);

  const std::size_t numel = dims.numel();
  for (std::size_t way = 0; way < ways; ++way) {
    const Category& cat = pool[ep.category_ids[way]];
    const auto picks = rng.choose(cat.samples.size(), need);
    for (std::size_t s = 0; s < need; ++s) {
      std::vector<double> sample = cat.samples[picks[s]];
      if (sample.size() != numel)
        throw std::invalid_argument("sample_episode: category '" + cat.name + "' sample has " +
                                    std::to_string(sample.size()) + " values, expected " +
                                    std::to_string(numel));
      if (augment_hflip && rng.uniform() < 0.5) hflip_inplace(sample, dims);
      double* dst = s < shots
                        ? ep.support.data().data() + (way * shots + s) * numel
                        : ep.query.data().data() + (way * qpc + (s - shots)) * numel;
      std::copy(sample.begin(), sample.end(), dst);
      if (s >= shots) ep.query_labels[way * qpc + (s - shots)] = way;
    }
  }
  return ep;
}

}  // namespace fsct
