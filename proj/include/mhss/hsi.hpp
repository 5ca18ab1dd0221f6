#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mhss/errors.hpp"
#include "mhss/rng.hpp"
#include "mhss/tensor.hpp"

namespace mhss {

// ---------------------------------------------------------------------------
// Cube representation.
//
// Values are stored band-interleaved-by-pixel: all bands of pixel (r,c) are
// contiguous at (r*W + c)*C. Labels use 0 for unlabeled background and 1..K
// for classes. In memory values are doubles, but every cube that flows
// through the pipeline holds float32-representable values (the file payload
// is float32), which keeps save -> load bitwise lossless.
// ---------------------------------------------------------------------------
struct HsiCube {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bands = 0;
  std::vector<double> values;          // height * width * bands
  std::vector<std::uint16_t> labels;   // height * width

  double value(std::size_t r, std::size_t c, std::size_t b) const {
    return values[(r * width + c) * bands + b];
  }
  std::uint16_t label(std::size_t r, std::size_t c) const { return labels[r * width + c]; }

  std::uint16_t max_label() const {
    std::uint16_t k = 0;
    for (std::uint16_t l : labels) k = std::max(k, l);
    return k;
  }

  std::size_t labeled_count() const {
    std::size_t n = 0;
    for (std::uint16_t l : labels) n += l != 0;
    return n;
  }
};

// ---------------------------------------------------------------------------
// Cube file format (little-endian):
//   offset 0   magic "HSC1"
//   offset 4   u32 height, offset 8 u32 width, offset 12 u32 bands
//   offset 16  u16 class count K (max label present)
//   offset 18  float32 values, H*W*C, band-interleaved-by-pixel
//   then       u16 labels, H*W
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

/// Sequential reader over an in-memory file image that reports the byte
/// offset of whatever it could not parse.
class ByteReader {
 public:
  ByteReader(const std::string& bytes, const std::string& what)
      : bytes_(bytes), what_(what) {}

  std::size_t offset() const { return pos_; }

  void expect_magic(const char* magic, std::size_t len) {
    need(len, "magic");
    if (std::memcmp(bytes_.data() + pos_, magic, len) != 0) {
      throw FormatError(what_ + ": bad magic at offset 0, expected \"" + std::string(magic, len) +
                        "\"");
    }
    pos_ += len;
  }

  std::uint16_t u16(const char* field) {
    need(2, field);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(byte(pos_ + i)) << (8 * i);
    pos_ += 2;
    return v;
  }

  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte(pos_ + i)) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64(const char* field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte(pos_ + i)) << (8 * i);
    pos_ += 8;
    return v;
  }

  float f32(const char* field) {
    const std::uint32_t bits = u32(field);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  double f64(const char* field) {
    const std::uint64_t bits = u64(field);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::string raw(std::size_t len, const char* field) {
    need(len, field);
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }

  void expect_end() {
    if (pos_ != bytes_.size()) {
      throw FormatError(what_ + ": " + std::to_string(bytes_.size() - pos_) +
                        " unexpected trailing bytes at offset " + std::to_string(pos_));
    }
  }

  void need(std::size_t n, const char* field) {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(what_ + ": truncated while reading " + field + " at offset " +
                        std::to_string(pos_));
    }
  }

 private:
  unsigned char byte(std::size_t i) const { return static_cast<unsigned char>(bytes_[i]); }
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path + " for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

}  // namespace detail

inline std::string cube_to_bytes(const HsiCube& cube) {
  const std::size_t n = cube.height * cube.width;
  if (cube.values.size() != n * cube.bands || cube.labels.size() != n) {
    throw ContractError("save_cube: inconsistent cube extents");
  }
  std::string out;
  out.reserve(18 + cube.values.size() * 4 + cube.labels.size() * 2);
  out.append("HSC1");
  detail::put_u32(out, static_cast<std::uint32_t>(cube.height));
  detail::put_u32(out, static_cast<std::uint32_t>(cube.width));
  detail::put_u32(out, static_cast<std::uint32_t>(cube.bands));
  detail::put_u16(out, cube.max_label());
  for (double v : cube.values) detail::put_f32(out, static_cast<float>(v));
  for (std::uint16_t l : cube.labels) detail::put_u16(out, l);
  return out;
}

inline void save_cube(const HsiCube& cube, const std::string& path) {
  detail::write_file(path, cube_to_bytes(cube));
}

inline HsiCube cube_from_bytes(const std::string& bytes, const std::string& what = "cube") {
  detail::ByteReader r(bytes, what);
  r.expect_magic("HSC1", 4);
  const std::uint32_t h = r.u32("height");
  const std::uint32_t w = r.u32("width");
  const std::uint32_t c = r.u32("bands");
  const std::uint32_t kHeaderOffsets[3] = {4, 8, 12};
  const std::uint32_t extents[3] = {h, w, c};
  const char* names[3] = {"height", "width", "bands"};
  for (int i = 0; i < 3; ++i) {
    if (extents[i] == 0) {
      throw FormatError(what + ": " + names[i] + "=0 at offset " +
                        std::to_string(kHeaderOffsets[i]) + " (extents must be >= 1)");
    }
    if (extents[i] > (1u << 20)) {
      throw FormatError(what + ": " + names[i] + "=" + std::to_string(extents[i]) +
                        " overflows the supported range at offset " +
                        std::to_string(kHeaderOffsets[i]));
    }
  }
  const std::uint64_t pixels = static_cast<std::uint64_t>(h) * w;
  if (pixels * c > (1ull << 32)) {
    throw FormatError(what + ": extents " + std::to_string(h) + "x" + std::to_string(w) + "x" +
                      std::to_string(c) + " overflow the supported payload size");
  }
  const std::uint16_t k = r.u16("class count");

  HsiCube cube;
  cube.height = h;
  cube.width = w;
  cube.bands = c;
  cube.values.resize(pixels * c);
  for (std::size_t i = 0; i < cube.values.size(); ++i) {
    const std::size_t off = r.offset();
    const float v = r.f32("values");
    if (!std::isfinite(v)) {
      throw FormatError(what + ": non-finite value at offset " + std::to_string(off));
    }
    cube.values[i] = static_cast<double>(v);
  }
  cube.labels.resize(pixels);
  for (std::size_t i = 0; i < pixels; ++i) {
    const std::size_t off = r.offset();
    const std::uint16_t l = r.u16("labels");
    if (l > k) {
      throw FormatError(what + ": label " + std::to_string(l) + " exceeds header class count " +
                        std::to_string(k) + " at offset " + std::to_string(off));
    }
    cube.labels[i] = l;
  }
  r.expect_end();
  return cube;
}

inline HsiCube load_cube(const std::string& path) {
  return cube_from_bytes(detail::read_file(path), path);
}

// ---------------------------------------------------------------------------
// Synthetic scenes.
// ---------------------------------------------------------------------------

/// Voronoi-region scene: K seeded sites partition the image, class k
/// (0-based) has a Gaussian spectral bump centered at band
/// floor((k+0.5)*C/K), plus i.i.d. noise. Every pixel is labeled 1..K.
/// Values pass through float32 so the cube round-trips its file format
/// bitwise. Deterministic per seed.
inline HsiCube synth_cube(std::uint64_t seed, std::size_t height, std::size_t width,
                          std::size_t bands, std::size_t classes, double noise_sigma) {
  if (classes < 2) throw ContractError("synth_cube: need at least 2 classes, got " +
                                       std::to_string(classes));
  if (bands < classes) {
    throw ContractError("synth_cube: bands (" + std::to_string(bands) +
                        ") must be >= classes (" + std::to_string(classes) + ")");
  }
  if (height == 0 || width == 0) throw ContractError("synth_cube: extents must be >= 1");
  if (!(noise_sigma >= 0.0)) throw ContractError("synth_cube: noise_sigma must be >= 0");
  if (classes > 65535) throw ContractError("synth_cube: too many classes for u16 labels");

  Rng rng(seed);
  std::vector<std::pair<std::size_t, std::size_t>> sites(classes);
  for (auto& s : sites) {
    s.first = rng.below(height);
    s.second = rng.below(width);
  }

  const double band_sigma = std::max(0.5, static_cast<double>(bands) / (4.0 * classes));
  std::vector<std::size_t> centers(classes);
  for (std::size_t k = 0; k < classes; ++k) {
    centers[k] = static_cast<std::size_t>((2 * k + 1) * bands / (2 * classes));
  }

  HsiCube cube;
  cube.height = height;
  cube.width = width;
  cube.bands = bands;
  cube.values.resize(height * width * bands);
  cube.labels.resize(height * width);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      std::size_t best = 0;
      std::uint64_t best_d2 = ~0ull;
      for (std::size_t k = 0; k < classes; ++k) {
        const std::int64_t dr = static_cast<std::int64_t>(r) - static_cast<std::int64_t>(sites[k].first);
        const std::int64_t dc = static_cast<std::int64_t>(c) - static_cast<std::int64_t>(sites[k].second);
        const std::uint64_t d2 = static_cast<std::uint64_t>(dr * dr + dc * dc);
        if (d2 < best_d2) {  // ties resolve to the lowest class index
          best_d2 = d2;
          best = k;
        }
      }
      cube.labels[r * width + c] = static_cast<std::uint16_t>(best + 1);
      for (std::size_t b = 0; b < bands; ++b) {
        const double d = static_cast<double>(b) - static_cast<double>(centers[best]);
        double v = std::exp(-d * d / (2.0 * band_sigma * band_sigma));
        if (noise_sigma > 0.0) v += noise_sigma * rng.gauss();
        cube.values[(r * width + c) * bands + b] = static_cast<double>(static_cast<float>(v));
      }
    }
  }
  return cube;
}

// ---------------------------------------------------------------------------
// Patch extraction.
// ---------------------------------------------------------------------------

struct PatchConfig {
  std::size_t patch_size = 4;  // P pixels per side
  std::size_t stride = 1;      // grid step between selected centers; 1 = every pixel
  // border handling is always mirror (symmetric reflection)

  void validate() const {
    if (patch_size < 1) throw ConfigError("patch size must be >= 1");
    if (stride < 1) throw ConfigError("patch stride must be >= 1");
  }
};

/// Symmetric mirror index: ...,1,0 | 0,1,...,n-1 | n-1,n-2,...
inline std::size_t mirror_index(std::int64_t i, std::size_t n) {
  const std::int64_t sn = static_cast<std::int64_t>(n);
  while (i < 0 || i >= sn) {
    if (i < 0) i = -i - 1;
    if (i >= sn) i = 2 * sn - 1 - i;
  }
  return static_cast<std::size_t>(i);
}

/// One P x P x C patch per selected pixel, mirror-padded at borders. The
/// patch "center" sits at patch coordinate (floor(P/2), floor(P/2)); the
/// center context is that pixel's spectrum. Patches are ordered by (row,
/// col), so extraction is deterministic.
struct PatchSet {
  std::size_t patch_size = 0;
  std::size_t bands = 0;
  std::size_t num_classes = 0;
  std::vector<double> patches;                               // N * P * P * C
  std::vector<std::uint16_t> center_labels;                  // N (0 only when unlabeled pixels were kept)
  std::vector<double> center_context;                        // N * C
  std::vector<std::pair<std::size_t, std::size_t>> positions;  // N source (row, col)

  std::size_t count() const { return center_labels.size(); }
  std::size_t tokens_per_patch() const { return patch_size * patch_size; }

  const double* patch(std::size_t i) const {
    return patches.data() + i * patch_size * patch_size * bands;
  }
  const double* context(std::size_t i) const { return center_context.data() + i * bands; }
};

inline PatchSet extract_patches(const HsiCube& cube, const PatchConfig& cfg,
                                bool include_unlabeled = false) {
  cfg.validate();
  if (cube.height == 0 || cube.width == 0 || cube.bands == 0) {
    throw ContractError("extract_patches: empty cube");
  }
  const std::size_t p = cfg.patch_size;
  const std::size_t c = cube.bands;
  const std::int64_t center_off = static_cast<std::int64_t>(p / 2);

  PatchSet set;
  set.patch_size = p;
  set.bands = c;
  set.num_classes = cube.max_label();

  for (std::size_t r = 0; r < cube.height; r += cfg.stride) {
    for (std::size_t col = 0; col < cube.width; col += cfg.stride) {
      const std::uint16_t label = cube.label(r, col);
      if (label == 0 && !include_unlabeled) continue;
      set.positions.emplace_back(r, col);
      set.center_labels.push_back(label);
      for (std::size_t b = 0; b < c; ++b) set.center_context.push_back(cube.value(r, col, b));
      for (std::size_t pr = 0; pr < p; ++pr) {
        const std::size_t src_r =
            mirror_index(static_cast<std::int64_t>(r) + static_cast<std::int64_t>(pr) - center_off,
                         cube.height);
        for (std::size_t pc = 0; pc < p; ++pc) {
          const std::size_t src_c = mirror_index(
              static_cast<std::int64_t>(col) + static_cast<std::int64_t>(pc) - center_off,
              cube.width);
          const double* px = cube.values.data() + (src_r * cube.width + src_c) * c;
          set.patches.insert(set.patches.end(), px, px + c);
        }
      }
    }
  }
  if (set.count() == 0) {
    throw ContractError("extract_patches: cube has no labeled pixels");
  }
  return set;
}

// ---------------------------------------------------------------------------
// Tokens.
// ---------------------------------------------------------------------------

/// Spatial tokens S and spectral tokens F for a batch of patches, both
/// shaped (B, L, C) with L = P*P.
///   S[b][l] = spectrum of the l-th pixel (row-major over the patch).
///   F[b]    = the transposed patch matrix (C x L) resampled to (L, C) by
///             nearest-neighbor index mapping floor(dst*src/size) on both
///             axes; when C == L this is exactly the transpose.
struct TokenPair {
  Tensor spatial;
  Tensor spectral;
};

inline TokenPair make_tokens(const PatchSet& set, const std::vector<std::size_t>& batch) {
  const std::size_t p = set.patch_size;
  const std::size_t l = p * p;
  const std::size_t c = set.bands;
  const std::size_t b = batch.size();
  if (b == 0) throw ContractError("make_tokens: empty batch");

  std::vector<double> s(b * l * c);
  std::vector<double> f(b * l * c);
  for (std::size_t bi = 0; bi < b; ++bi) {
    const std::size_t idx = batch[bi];
    if (idx >= set.count()) {
      throw ContractError("make_tokens: patch index " + std::to_string(idx) + " out of range [0," +
                          std::to_string(set.count()) + ")");
    }
    const double* patch = set.patch(idx);  // l x c, rows are pixel spectra
    double* srow = s.data() + bi * l * c;
    std::copy_n(patch, l * c, srow);
    double* frow = f.data() + bi * l * c;
    for (std::size_t li = 0; li < l; ++li) {
      const std::size_t band = li * c / l;       // which band this token samples
      for (std::size_t ci = 0; ci < c; ++ci) {
        const std::size_t pos = ci * l / c;      // which pixel position this column samples
        frow[li * c + ci] = patch[pos * c + band];
      }
    }
  }
  TokenPair out;
  out.spatial = Tensor::from({b, l, c}, std::move(s));
  out.spectral = Tensor::from({b, l, c}, std::move(f));
  return out;
}

/// Center spectra of a batch as a (B, C) tensor; the gating context.
inline Tensor make_context(const PatchSet& set, const std::vector<std::size_t>& batch) {
  const std::size_t c = set.bands;
  std::vector<double> ctx(batch.size() * c);
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    if (batch[bi] >= set.count()) {
      throw ContractError("make_context: patch index " + std::to_string(batch[bi]) +
                          " out of range [0," + std::to_string(set.count()) + ")");
    }
    std::copy_n(set.context(batch[bi]), c, ctx.data() + bi * c);
  }
  return Tensor::from({batch.size(), c}, std::move(ctx));
}

// ---------------------------------------------------------------------------
// Stratified splitting.
// ---------------------------------------------------------------------------

struct SplitSpec {
  double train_fraction = 0.1;
  double val_fraction = 0.1;
  double test_fraction = 0.8;
  std::uint64_t seed = 1;

  void validate() const {
    if (train_fraction < 0 || val_fraction < 0 || test_fraction < 0) {
      throw ConfigError("split fractions must be >= 0");
    }
    const double sum = train_fraction + val_fraction + test_fraction;
    if (std::abs(sum - 1.0) > 1e-9) {
      throw ConfigError("split fractions must sum to 1, got " + std::to_string(sum));
    }
  }
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::vector<std::string> warnings;  // classes too small to cover every requested split
};

/// Per-class split: each class contributes ceil(fraction * n) samples to
/// train and val (capped by what remains) and the rest to test. Class order
/// and a seeded shuffle make the result deterministic; the three lists
/// partition [0, N).
inline SplitIndices stratified_split(const PatchSet& set, const SplitSpec& spec) {
  spec.validate();
  std::vector<std::vector<std::size_t>> by_class(set.num_classes + 1);
  for (std::size_t i = 0; i < set.count(); ++i) {
    const std::uint16_t label = set.center_labels[i];
    if (label > set.num_classes) throw ContractError("stratified_split: label out of range");
    by_class[label].push_back(i);
  }

  Rng rng(spec.seed);
  SplitIndices out;
  for (std::size_t k = 1; k <= set.num_classes; ++k) {
    auto& idxs = by_class[k];
    if (idxs.empty()) continue;
    shuffle(idxs, rng);
    const std::size_t n = idxs.size();
    std::size_t n_train = std::min(
        n, static_cast<std::size_t>(std::ceil(spec.train_fraction * static_cast<double>(n))));
    std::size_t n_val = std::min(
        n - n_train, static_cast<std::size_t>(std::ceil(spec.val_fraction * static_cast<double>(n))));
    const std::size_t n_test = n - n_train - n_val;
    if ((spec.train_fraction > 0 && n_train == 0) || (spec.val_fraction > 0 && n_val == 0) ||
        (spec.test_fraction > 0 && n_test == 0)) {
      out.warnings.push_back("class " + std::to_string(k) + " has only " + std::to_string(n) +
                             " samples; some requested splits are empty for it");
    }
    out.train.insert(out.train.end(), idxs.begin(), idxs.begin() + n_train);
    out.val.insert(out.val.end(), idxs.begin() + n_train, idxs.begin() + n_train + n_val);
    out.test.insert(out.test.end(), idxs.begin() + n_train + n_val, idxs.end());
  }
  // Unlabeled entries (possible when include_unlabeled extraction was used)
  // are deliberately left out of every split.
  return out;
}

// ---------------------------------------------------------------------------
// Label-map export.
// ---------------------------------------------------------------------------

/// Raw binary PGM, one byte per pixel carrying the class index directly.
inline void write_pgm(const std::string& path, const std::vector<std::uint16_t>& labels,
                      std::size_t height, std::size_t width) {
  if (labels.size() != height * width) throw ContractError("write_pgm: label count mismatch");
  for (std::uint16_t l : labels) {
    if (l > 255) throw ContractError("write_pgm: class index " + std::to_string(l) + " exceeds 255");
  }
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.reserve(out.size() + labels.size());
  for (std::uint16_t l : labels) out.push_back(static_cast<char>(l));
  detail::write_file(path, out);
}

/// Fixed 16-color palette; index 0 (unlabeled) is black, higher classes wrap.
inline const std::array<std::array<std::uint8_t, 3>, 16>& label_palette() {
  static const std::array<std::array<std::uint8_t, 3>, 16> palette = {{
      {0, 0, 0},       {230, 25, 75},   {60, 180, 75},   {255, 225, 25},
      {0, 130, 200},   {245, 130, 48},  {145, 30, 180},  {70, 240, 240},
      {240, 50, 230},  {210, 245, 60},  {250, 190, 190}, {0, 128, 128},
      {170, 110, 40},  {128, 0, 0},     {128, 128, 0},   {0, 0, 128},
  }};
  return palette;
}

inline void write_ppm(const std::string& path, const std::vector<std::uint16_t>& labels,
                      std::size_t height, std::size_t width) {
  if (labels.size() != height * width) throw ContractError("write_ppm: label count mismatch");
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.reserve(out.size() + labels.size() * 3);
  const auto& palette = label_palette();
  for (std::uint16_t l : labels) {
    const auto& rgb = palette[l % palette.size()];
    out.push_back(static_cast<char>(rgb[0]));
    out.push_back(static_cast<char>(rgb[1]));
    out.push_back(static_cast<char>(rgb[2]));
  }
  detail::write_file(path, out);
}

}  // namespace mhss
