#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <unordered_map>
#include <vector>

#include "denseloc/data.hpp"
#include "denseloc/geometry.hpp"
#include "denseloc/tensor.hpp"

namespace denseloc {

struct SceneSpec {
  int grid_size = 4;            // blocks per side
  double meters_per_block = 50.0;
  int views_per_block = 8;
  std::uint64_t texture_seed = 0;
  double occluder_rate = 0.5;
  int image_size = 64;          // square views, multiple of 32
};

inline void validate_scene(const SceneSpec& spec) {
  if (spec.grid_size <= 0) throw ConfigError("grid_size must be positive");
  if (spec.meters_per_block <= 0.0) throw ConfigError("meters_per_block must be positive");
  if (spec.views_per_block <= 0) throw ConfigError("views_per_block must be positive");
  if (spec.occluder_rate < 0.0 || spec.occluder_rate > 1.0) throw ConfigError("occluder_rate must lie in [0, 1]");
  if (spec.image_size <= 0 || spec.image_size % kImageAlign != 0)
    throw ConfigError("image_size must be a positive multiple of " + std::to_string(kImageAlign));
}

struct PairRecord {
  std::string id1;
  std::string id2;
  Homography h_12;  // image-1 pixel coords -> image-2 pixel coords
  std::string photometric_tag;
};

struct CityData {
  std::vector<ManifestEntry> manifest;
  std::unordered_map<std::string, Tensor3> images;  // id -> pixels
  std::vector<PairRecord> pairs;                    // all same-block view pairs
};

namespace citydetail {

// Seed salts partition the texture_seed stream: textures, training views and
// held-out benchmark views never share draws.
inline constexpr std::uint64_t kTextureSalt = 0x10000000ull;
inline constexpr std::uint64_t kViewSalt = 0x20000000ull;
inline constexpr std::uint64_t kEvalSalt = 0x30000000ull;

// Procedural facade: flat base color + multiscale value noise + colored
// rectangles. Distinct blocks draw from distinct streams, so textures are
// visually discriminable.
inline Tensor3 make_texture(const SceneSpec& spec, int block_index) {
  const int t = spec.image_size * 2;
  Rng rng(derive_seed(spec.texture_seed, citydetail::kTextureSalt + static_cast<std::uint64_t>(block_index)));
  Tensor3 tex(t, t, 3);
  double base[3];
  for (double& b : base) b = rng.uniform(0.2, 0.8);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < t; ++j)
      for (int k = 0; k < 3; ++k) tex.at(i, j, k) = base[k];

  const int scales[3] = {4, 8, 16};
  const double amps[3] = {0.25, 0.15, 0.10};
  for (int s = 0; s < 3; ++s) {
    const int g = scales[s];
    Grid2 lattice(g + 1, g + 1);
    for (double& v : lattice.data) v = rng.uniform(-1.0, 1.0);
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < t; ++j) {
        const double gy = static_cast<double>(i) * g / t;
        const double gx = static_cast<double>(j) * g / t;
        const int y0 = static_cast<int>(gy), x0 = static_cast<int>(gx);
        const double ty = gy - y0, tx = gx - x0;
        const double v = (1 - ty) * ((1 - tx) * lattice.at(y0, x0) + tx * lattice.at(y0, x0 + 1)) +
                         ty * ((1 - tx) * lattice.at(y0 + 1, x0) + tx * lattice.at(y0 + 1, x0 + 1));
        const double add = amps[s] * v;
        for (int k = 0; k < 3; ++k) tex.at(i, j, k) += add;
      }
  }

  const int n_rect = 8 + static_cast<int>(rng.uniform_index(9));
  for (int r = 0; r < n_rect; ++r) {
    const int w = 4 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(t / 4)));
    const int h = 4 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(t / 4)));
    const int x0 = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(t)));
    const int y0 = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(t)));
    double color[3];
    for (double& c : color) c = rng.uniform(0.1, 0.9);
    for (int i = y0; i < std::min(t, y0 + h); ++i)
      for (int j = x0; j < std::min(t, x0 + w); ++j)
        for (int k = 0; k < 3; ++k) tex.at(i, j, k) = color[k];
  }
  for (double& v : tex.data) v = std::clamp(v, 0.02, 0.98);
  return tex;
}

struct ViewResult {
  Tensor3 image;
  Homography h_tex_to_view;
  double dynamic_score = 0.0;
  std::string photometric_tag;
};

// One camera view: perspective warp of the block texture (corner jitter at
// most 15% of image size), photometric jitter, and optional rectangular
// occluders whose exact covered fraction becomes the dynamic score.
inline ViewResult make_view(const SceneSpec& spec, const Tensor3& texture, std::uint64_t view_stream) {
  const int s = spec.image_size;
  Rng rng(view_stream);
  const double jitter = 0.15 * s;

  // source footprint: the texture's center square, nudged per view
  const double cx = s * 0.5 + rng.uniform(-jitter, jitter);
  const double cy = s * 0.5 + rng.uniform(-jitter, jitter);
  const std::array<Vec2, 4> src = {Vec2{cx, cy}, Vec2{cx + s, cy}, Vec2{cx + s, cy + s}, Vec2{cx, cy + s}};
  std::array<Vec2, 4> dst = {Vec2{0, 0}, Vec2{static_cast<double>(s), 0},
                             Vec2{static_cast<double>(s), static_cast<double>(s)}, Vec2{0, static_cast<double>(s)}};
  for (Vec2& d : dst) {
    d.x += rng.uniform(-jitter, jitter);
    d.y += rng.uniform(-jitter, jitter);
  }

  ViewResult out;
  out.h_tex_to_view = homography_from_points(src, dst);
  out.image = warp_image(texture, out.h_tex_to_view, s, s);

  const double scale = rng.uniform(0.8, 1.2);
  double gain[3];
  for (double& g : gain) g = rng.uniform(0.95, 1.05);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j)
      for (int k = 0; k < 3; ++k) out.image.at(i, j, k) = std::clamp(out.image.at(i, j, k) * scale * gain[k], 0.0, 1.0);
  char tag[80];
  std::snprintf(tag, sizeof(tag), "s%.4f_g%.4f_%.4f_%.4f", scale, gain[0], gain[1], gain[2]);
  out.photometric_tag = tag;

  if (rng.uniform() < spec.occluder_rate) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(s) * s, 0);
    const int n_occ = 1 + static_cast<int>(rng.uniform_index(3));
    for (int o = 0; o < n_occ; ++o) {
      const int w = s / 8 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(s / 4)));
      const int h = s / 8 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(s / 4)));
      const int x0 = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(s - w)));
      const int y0 = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(s - h)));
      double color[3];
      for (double& c : color) c = rng.uniform(0.1, 0.9);
      for (int i = y0; i < y0 + h; ++i)
        for (int j = x0; j < x0 + w; ++j) {
          mask[static_cast<std::size_t>(i) * s + j] = 1;
          for (int k = 0; k < 3; ++k) out.image.at(i, j, k) = color[k];
        }
    }
    std::size_t covered = 0;
    for (const std::uint8_t m : mask) covered += m;
    out.dynamic_score = static_cast<double>(covered) / (static_cast<double>(s) * s);
  }
  return out;
}

// Deterministic split pattern, cycling per view index within a block.
inline Split split_for_view(int view_index) {
  static const Split pattern[8] = {Split::train, Split::db, Split::train, Split::query,
                                   Split::train, Split::val, Split::train, Split::db};
  return pattern[view_index % 8];
}

inline std::string block_id(int block_index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "b%03d", block_index);
  return buf;
}

}  // namespace citydetail

inline CityData generate_city(const SceneSpec& spec) {
  validate_scene(spec);
  CityData city;
  const int blocks = spec.grid_size * spec.grid_size;
  for (int bi = 0; bi < blocks; ++bi) {
    const Tensor3 texture = citydetail::make_texture(spec, bi);
    const int bx = bi % spec.grid_size;
    const int by = bi / spec.grid_size;
    const LatLon gps = meters_to_latlon((bx + 0.5) * spec.meters_per_block, (by + 0.5) * spec.meters_per_block);

    std::vector<citydetail::ViewResult> views;
    for (int vi = 0; vi < spec.views_per_block; ++vi) {
      const std::uint64_t stream =
          derive_seed(spec.texture_seed, citydetail::kViewSalt + static_cast<std::uint64_t>(bi) * 4096 + vi);
      views.push_back(citydetail::make_view(spec, texture, stream));
      const std::string id = citydetail::block_id(bi) + "_v" + std::to_string(vi);
      ManifestEntry entry;
      entry.id = id;
      entry.image_path = "images/" + id + ".png";
      entry.lat = gps.lat;
      entry.lon = gps.lon;
      entry.dynamic_score = views.back().dynamic_score;
      entry.split = citydetail::split_for_view(vi);
      city.manifest.push_back(entry);
      city.images.emplace(id, views.back().image);
    }
    for (int a = 0; a < spec.views_per_block; ++a)
      for (int b = a + 1; b < spec.views_per_block; ++b) {
        PairRecord rec;
        rec.id1 = citydetail::block_id(bi) + "_v" + std::to_string(a);
        rec.id2 = citydetail::block_id(bi) + "_v" + std::to_string(b);
        rec.h_12 = views[b].h_tex_to_view.compose(views[a].h_tex_to_view.inverse());
        rec.photometric_tag = views[a].photometric_tag + "|" + views[b].photometric_tag;
        city.pairs.push_back(std::move(rec));
      }
  }
  return city;
}

struct BenchmarkData {
  std::unordered_map<std::string, Tensor3> images;
  std::vector<PairRecord> pairs;  // one held-out pair per block
};

// Held-out matching benchmark: two extra views per block drawn from a seed
// partition disjoint from the training views.
inline BenchmarkData generate_pairs_benchmark(const SceneSpec& spec) {
  validate_scene(spec);
  BenchmarkData bench;
  const int blocks = spec.grid_size * spec.grid_size;
  for (int bi = 0; bi < blocks; ++bi) {
    const Tensor3 texture = citydetail::make_texture(spec, bi);
    citydetail::ViewResult v0 = citydetail::make_view(
        spec, texture, derive_seed(spec.texture_seed, citydetail::kEvalSalt + static_cast<std::uint64_t>(bi) * 4096));
    citydetail::ViewResult v1 = citydetail::make_view(
        spec, texture,
        derive_seed(spec.texture_seed, citydetail::kEvalSalt + static_cast<std::uint64_t>(bi) * 4096 + 1));
    const std::string id0 = citydetail::block_id(bi) + "_e0";
    const std::string id1 = citydetail::block_id(bi) + "_e1";
    PairRecord rec;
    rec.id1 = id0;
    rec.id2 = id1;
    rec.h_12 = v1.h_tex_to_view.compose(v0.h_tex_to_view.inverse());
    rec.photometric_tag = v0.photometric_tag + "|" + v1.photometric_tag;
    bench.pairs.push_back(std::move(rec));
    bench.images.emplace(id0, std::move(v0.image));
    bench.images.emplace(id1, std::move(v1.image));
  }
  return bench;
}

struct AugmentConfig {
  double p_blur = 0.5;
  double p_noise = 0.5;
  double sigma_max = 0.02;
  double p_brightness = 0.5;
  double brightness_delta = 0.2;
};

// Photometric-only training augmentation (geometry untouched, so pair
// homographies stay valid): 3-tap motion blur, Gaussian noise, brightness
// scale, each applied with its own probability; output clamped to [0, 1].
inline void augment_image(Tensor3& img, const AugmentConfig& cfg, Rng& rng) {
  if (rng.uniform() < cfg.p_blur) {
    const bool horizontal = rng.uniform() < 0.5;
    Tensor3 src = img;
    for (int i = 0; i < img.h; ++i)
      for (int j = 0; j < img.w; ++j)
        for (int k = 0; k < img.c; ++k) {
          double acc = 0.0;
          for (int d = -1; d <= 1; ++d) {
            const int ii = horizontal ? i : std::clamp(i + d, 0, img.h - 1);
            const int jj = horizontal ? std::clamp(j + d, 0, img.w - 1) : j;
            acc += src.at(ii, jj, k);
          }
          img.at(i, j, k) = acc / 3.0;
        }
  }
  if (rng.uniform() < cfg.p_noise) {
    const double sigma = rng.uniform(0.0, cfg.sigma_max);
    for (double& v : img.data) v += rng.normal(0.0, sigma);
  }
  if (rng.uniform() < cfg.p_brightness) {
    const double scale = 1.0 + rng.uniform(-cfg.brightness_delta, cfg.brightness_delta);
    for (double& v : img.data) v *= scale;
  }
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace denseloc
