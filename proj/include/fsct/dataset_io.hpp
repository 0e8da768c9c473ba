#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include <nlohmann/json.hpp>

#include "fsct/data.hpp"
#include "fsct/rng.hpp"

namespace fsct {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Synthetic clusters.
// ---------------------------------------------------------------------------

/// Gaussian cluster generator: category means sit on a sphere whose radius
/// makes typical pairwise mean distance equal `separation`; samples add
/// isotropic noise of the given std. Everything derives from the seed.
struct SyntheticSpec {
  std::size_t train_categories = 20;
  std::size_t val_categories = 8;
  std::size_t test_categories = 10;
  std::size_t samples_per_category = 30;
  SampleDims dims{.features = 16};
  double separation = 10.0;
  double noise_std = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (train_categories == 0 || val_categories == 0 || test_categories == 0)
      throw std::invalid_argument("synthetic spec: every split needs at least one category");
    if (samples_per_category == 0)
      throw std::invalid_argument("synthetic spec: samples_per_category must be positive");
    if (dims.numel() == 0) throw std::invalid_argument("synthetic spec: empty sample dims");
    if (noise_std <= 0.0) throw std::invalid_argument("synthetic spec: std must be positive");
    if (separation < 0.0) throw std::invalid_argument("synthetic spec: separation must be >= 0");
  }
};

inline SyntheticSpec synthetic_spec_from_json(const json& j) {
  SyntheticSpec spec;
  spec.train_categories = j.value("train_categories", spec.train_categories);
  spec.val_categories = j.value("val_categories", spec.val_categories);
  spec.test_categories = j.value("test_categories", spec.test_categories);
  spec.samples_per_category = j.value("samples_per_category", spec.samples_per_category);
  if (j.contains("image_size")) {
    const auto& sz = j.at("image_size");
    if (!sz.is_array() || sz.size() != 3)
      throw std::invalid_argument("synthetic spec: image_size must be [channels, height, width]");
    spec.dims = SampleDims{.features = 0,
                           .channels = sz.at(0).get<std::size_t>(),
                           .height = sz.at(1).get<std::size_t>(),
                           .width = sz.at(2).get<std::size_t>()};
  } else {
    spec.dims = SampleDims{.features = j.value("feature_dim", std::size_t{16})};
  }
  spec.separation = j.value("separation", spec.separation);
  spec.noise_std = j.value("std", spec.noise_std);
  spec.seed = j.value("seed", spec.seed);
  spec.validate();
  return spec;
}

inline json synthetic_spec_to_json(const SyntheticSpec& spec) {
  json j;
  j["train_categories"] = spec.train_categories;
  j["val_categories"] = spec.val_categories;
  j["test_categories"] = spec.test_categories;
  j["samples_per_category"] = spec.samples_per_category;
  if (spec.dims.is_image())
    j["image_size"] = {spec.dims.channels, spec.dims.height, spec.dims.width};
  else
    j["feature_dim"] = spec.dims.features;
  j["separation"] = spec.separation;
  j["std"] = spec.noise_std;
  j["seed"] = spec.seed;
  return j;
}

inline SplitDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SplitDataset ds;
  ds.dims = spec.dims;
  const std::size_t numel = spec.dims.numel();
  Rng rng(derive_seed(spec.seed, Stream::kSynthetic));
  // Unit directions scaled by separation / sqrt(2): two independent random
  // directions are near-orthogonal in high dimension, putting their
  // separation-scaled endpoints about `separation` apart.
  const double radius = spec.separation / std::sqrt(2.0);
  auto make_split = [&](std::vector<Category>& out, std::size_t count, const char* prefix) {
    for (std::size_t c = 0; c < count; ++c) {
      std::vector<double> mean(numel);
      double norm = 0.0;
      for (double& v : mean) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::max(std::sqrt(norm), 1e-12);
      for (double& v : mean) v *= radius / norm;
      Category cat;
      char name[64];
      std::snprintf(name, sizeof(name), "%s_%04zu", prefix, c);
      cat.name = name;
      cat.samples.reserve(spec.samples_per_category);
      for (std::size_t s = 0; s < spec.samples_per_category; ++s) {
        std::vector<double> sample(numel);
        for (std::size_t i = 0; i < numel; ++i)
          sample[i] = mean[i] + spec.noise_std * rng.normal();
        cat.samples.push_back(std::move(sample));
      }
      out.push_back(std::move(cat));
    }
  };
  make_split(ds.train, spec.train_categories, "syn_train");
  make_split(ds.val, spec.val_categories, "syn_val");
  make_split(ds.test, spec.test_categories, "syn_test");
  validate_splits(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Image decoding: PNG via libpng, PPM/PGM hand-parsed. Values land in [0,1].
// ---------------------------------------------------------------------------

struct DecodedImage {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<double> pixels;  // channel-major planes
};

inline DecodedImage decode_png(const std::string& path, std::size_t want_channels) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw std::runtime_error("cannot decode PNG '" + path + "': " + image.message);
  image.format = want_channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const std::size_t ch = want_channels == 1 ? 1 : 3;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw std::runtime_error("cannot decode PNG '" + path + "': " + image.message);
  }
  DecodedImage out;
  out.channels = ch;
  out.height = image.height;
  out.width = image.width;
  out.pixels.resize(ch * out.height * out.width);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t c = 0; c < ch; ++c)
        out.pixels[(c * out.height + y) * out.width + x] =
            buffer[(y * out.width + x) * ch + c] / 255.0;
  return out;
}

namespace detail {

inline int pnm_next_value(std::istream& in, const std::string& path) {
  // Skips whitespace and # comments between header tokens.
  for (;;) {
    const int c = in.peek();
    if (c == EOF) throw std::runtime_error("truncated PNM header in '" + path + "'");
    if (c == '#') {
      std::string line;
      std::getline(in, line);
      continue;
    }
    if (std::isspace(c)) {
      in.get();
      continue;
    }
    break;
  }
  int value = 0;
  in >> value;
  if (!in) throw std::runtime_error("bad PNM header token in '" + path + "'");
  return value;
}

}  // namespace detail

inline DecodedImage decode_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  char p = 0, kind = 0;
  in.get(p);
  in.get(kind);
  if (p != 'P' || (kind != '2' && kind != '3' && kind != '5' && kind != '6'))
    throw std::runtime_error("unsupported PNM magic in '" + path + "'");
  const bool color = kind == '3' || kind == '6';
  const bool binary = kind == '5' || kind == '6';
  const int width = detail::pnm_next_value(in, path);
  const int height = detail::pnm_next_value(in, path);
  const int maxval = detail::pnm_next_value(in, path);
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 255)
    throw std::runtime_error("unsupported PNM geometry/maxval in '" + path + "'");
  const std::size_t ch = color ? 3 : 1;
  const std::size_t count = ch * static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  std::vector<int> raw(count);
  if (binary) {
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> bytes(count);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in.gcount()) != count)
      throw std::runtime_error("truncated PNM pixel data in '" + path + "'");
    for (std::size_t i = 0; i < count; ++i) raw[i] = bytes[i];
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      in >> raw[i];
      if (!in) throw std::runtime_error("truncated PNM pixel data in '" + path + "'");
    }
  }
  DecodedImage out;
  out.channels = ch;
  out.height = static_cast<std::size_t>(height);
  out.width = static_cast<std::size_t>(width);
  out.pixels.resize(count);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t c = 0; c < ch; ++c)
        out.pixels[(c * out.height + y) * out.width + x] =
            raw[(y * out.width + x) * ch + c] / static_cast<double>(maxval);
  return out;
}

inline DecodedImage decode_image(const std::string& path, std::size_t want_channels) {
  const std::string ext = std::filesystem::path(path).extension().string();
  DecodedImage img;
  if (ext == ".png" || ext == ".PNG")
    img = decode_png(path, want_channels);
  else if (ext == ".ppm" || ext == ".pgm" || ext == ".PPM" || ext == ".PGM")
    img = decode_pnm(path);
  else
    throw std::runtime_error("unsupported image extension '" + ext + "' for '" + path + "'");
  if (img.channels == want_channels) return img;
  DecodedImage conv;
  conv.channels = want_channels;
  conv.height = img.height;
  conv.width = img.width;
  conv.pixels.resize(want_channels * img.height * img.width);
  const std::size_t plane = img.height * img.width;
  if (img.channels == 1) {
    for (std::size_t c = 0; c < want_channels; ++c)
      std::copy(img.pixels.begin(), img.pixels.begin() + static_cast<std::ptrdiff_t>(plane),
                conv.pixels.begin() + static_cast<std::ptrdiff_t>(c * plane));
  } else if (want_channels == 1) {
    for (std::size_t p = 0; p < plane; ++p) {
      double acc = 0.0;
      for (std::size_t c = 0; c < img.channels; ++c) acc += img.pixels[c * plane + p];
      conv.pixels[p] = acc / static_cast<double>(img.channels);
    }
  } else {
    throw std::runtime_error("cannot adapt " + std::to_string(img.channels) + "-channel image '" +
                             path + "' to " + std::to_string(want_channels) + " channels");
  }
  return conv;
}

/// Separable bilinear resampling (half-pixel centers), channel by channel.
inline std::vector<double> bilinear_resize(const DecodedImage& img, std::size_t out_h,
                                           std::size_t out_w) {
  std::vector<double> out(img.channels * out_h * out_w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
  for (std::size_t c = 0; c < img.channels; ++c) {
    const double* src = img.pixels.data() + c * img.height * img.width;
    double* dst = out.data() + c * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                   static_cast<double>(img.height - 1));
      const std::size_t y0 = static_cast<std::size_t>(fy);
      const std::size_t y1 = std::min(y0 + 1, img.height - 1);
      const double wy = fy - static_cast<double>(y0);
      for (std::size_t x = 0; x < out_w; ++x) {
        const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                     static_cast<double>(img.width - 1));
        const std::size_t x0 = static_cast<std::size_t>(fx);
        const std::size_t x1 = std::min(x0 + 1, img.width - 1);
        const double wx = fx - static_cast<double>(x0);
        const double top = src[y0 * img.width + x0] * (1.0 - wx) + src[y0 * img.width + x1] * wx;
        const double bot = src[y1 * img.width + x0] * (1.0 - wx) + src[y1 * img.width + x1] * wx;
        dst[y * out_w + x] = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest loading.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_list(const json& manifest, const char* split) {
  std::vector<std::string> names;
  const auto& splits = manifest.at("splits");
  if (!splits.contains(split)) return names;
  for (const auto& v : splits.at(split)) names.push_back(v.get<std::string>());
  return names;
}

}  // namespace detail

/// Feature-table file: one sample per line, first token the category name,
/// then the feature values, separated by commas or whitespace.
inline void load_feature_table(const std::filesystem::path& path, std::size_t feature_dim,
                               std::vector<Category>& out,
                               const std::vector<std::string>& wanted) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open feature table '" + path.string() + "'");
  std::vector<Category> cats;
  for (const std::string& name : wanted) cats.push_back(Category{name, {}});
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    for (char& ch : line)
      if (ch == ',' || ch == '\t') ch = ' ';
    std::istringstream row(line);
    std::string name;
    if (!(row >> name)) continue;  // blank line
    std::vector<double> values;
    double v;
    while (row >> v) values.push_back(v);
    if (values.size() != feature_dim)
      throw std::runtime_error("ragged feature row in '" + path.string() + "' line " +
                               std::to_string(line_no) + ": got " +
                               std::to_string(values.size()) + " values, expected " +
                               std::to_string(feature_dim));
    for (Category& c : cats)
      if (c.name == name) {
        c.samples.push_back(std::move(values));
        break;
      }
  }
  for (Category& c : cats) {
    if (c.samples.empty())
      throw std::runtime_error("feature table '" + path.string() + "' has no rows for category '" +
                               c.name + "'");
    out.push_back(std::move(c));
  }
}

/// Loads a dataset described by a manifest object. `base_dir` anchors
/// relative paths. Formats: "synthetic" (generator parameters under
/// "synthetic"), "feature-table" ("path", "feature_dim", "splits"),
/// "image-folder" ("root", "image_size", optional "normalize_mean"/"_std",
/// "splits" with one directory per category).
inline SplitDataset load_dataset_json(const json& manifest,
                                      const std::filesystem::path& base_dir) {
  const std::string format = manifest.at("format").get<std::string>();
  if (format == "synthetic")
    return generate_synthetic(synthetic_spec_from_json(manifest.at("synthetic")));

  SplitDataset ds;
  if (format == "feature-table") {
    ds.dims = SampleDims{.features = manifest.at("feature_dim").get<std::size_t>()};
    const std::filesystem::path table = base_dir / manifest.at("path").get<std::string>();
    load_feature_table(table, ds.dims.features, ds.train, detail::split_list(manifest, "train"));
    load_feature_table(table, ds.dims.features, ds.val, detail::split_list(manifest, "val"));
    load_feature_table(table, ds.dims.features, ds.test, detail::split_list(manifest, "test"));
  } else if (format == "image-folder") {
    const auto& sz = manifest.at("image_size");
    if (!sz.is_array() || sz.size() != 3)
      throw std::runtime_error("manifest image_size must be [channels, height, width]");
    ds.dims = SampleDims{.features = 0,
                         .channels = sz.at(0).get<std::size_t>(),
                         .height = sz.at(1).get<std::size_t>(),
                         .width = sz.at(2).get<std::size_t>()};
    std::vector<double> mean(ds.dims.channels, 0.0), stdev(ds.dims.channels, 1.0);
    if (manifest.contains("normalize_mean"))
      mean = manifest.at("normalize_mean").get<std::vector<double>>();
    if (manifest.contains("normalize_std"))
      stdev = manifest.at("normalize_std").get<std::vector<double>>();
    if (mean.size() != ds.dims.channels || stdev.size() != ds.dims.channels)
      throw std::runtime_error("normalization constants must list one value per channel");
    const std::filesystem::path root = base_dir / manifest.at("root").get<std::string>();
    auto load_split = [&](std::vector<Category>& out, const char* split) {
      for (const std::string& name : detail::split_list(manifest, split)) {
        const std::filesystem::path dir = root / name;
        if (!std::filesystem::is_directory(dir))
          throw std::runtime_error("missing category directory '" + dir.string() + "'");
        std::vector<std::string> files;
        for (const auto& entry : std::filesystem::directory_iterator(dir))
          if (entry.is_regular_file()) files.push_back(entry.path().string());
        std::sort(files.begin(), files.end());
        if (files.empty())
          throw std::runtime_error("category directory '" + dir.string() + "' has no images");
        Category cat{name, {}};
        const std::size_t plane = ds.dims.height * ds.dims.width;
        for (const std::string& file : files) {
          DecodedImage img = decode_image(file, ds.dims.channels);
          std::vector<double> px = img.height == ds.dims.height && img.width == ds.dims.width
                                       ? img.pixels
                                       : bilinear_resize(img, ds.dims.height, ds.dims.width);
          for (std::size_t c = 0; c < ds.dims.channels; ++c)
            for (std::size_t p = 0; p < plane; ++p)
              px[c * plane + p] = (px[c * plane + p] - mean[c]) / stdev[c];
          cat.samples.push_back(std::move(px));
        }
        out.push_back(std::move(cat));
      }
    };
    load_split(ds.train, "train");
    load_split(ds.val, "val");
    load_split(ds.test, "test");
  } else {
    throw std::runtime_error("unknown dataset format '" + format + "'");
  }
  validate_splits(ds);
  return ds;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  json j;
  in >> j;
  return j;
}

inline SplitDataset load_dataset(const std::string& manifest_path) {
  return load_dataset_json(read_json_file(manifest_path),
                           std::filesystem::path(manifest_path).parent_path());
}

}  // namespace fsct
