#include "fvae/facedata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fvae/binary_io.hpp"
#include "fvae/image_io.hpp"

namespace fvae {
namespace {

struct Rgb {
  float r, g, b;
};

// Expression-dependent geometry derived once per face.
struct FaceGeometry {
  float cx = 0.5f, cy = 0.5f, rx, ry;
  float eye_y, eye_dx, eye_rx, eye_ry;
  float brow_y, brow_tilt;
  float mouth_y, mouth_hw, mouth_curve, mouth_skew, mouth_open;
  Rgb skin;

  explicit FaceGeometry(const FaceParams& p) {
    const float i = p.intensity;
    auto amount = [&](Expression e) { return p.expression == e ? i : 0.0f; };
    const float smile = amount(Expression::smile), disgust = amount(Expression::disgust);
    const float squint = amount(Expression::squint), surprise = amount(Expression::surprise);

    rx = p.identity.face_radius;
    ry = p.identity.face_radius * 1.12f;
    eye_y = p.identity.eye_height;
    eye_dx = p.identity.eye_spacing * 0.5f;
    eye_rx = 0.065f;
    eye_ry = 0.032f * (1.0f + 0.9f * surprise - 0.75f * squint);
    brow_y = eye_y - 0.075f - 0.045f * surprise + 0.02f * squint + 0.025f * disgust;
    brow_tilt = 0.035f * disgust;
    mouth_y = cy + 0.5f * ry;
    mouth_hw = 0.12f + 0.035f * smile - 0.045f * surprise;
    mouth_curve = 0.045f * smile - 0.035f * disgust;
    mouth_skew = 0.02f * disgust;
    mouth_open = 0.055f * surprise;
    const float t = p.identity.skin_tone;
    skin = {t, t * 0.82f, t * 0.7f};
  }
};

constexpr Rgb kBackground{0.14f, 0.17f, 0.24f};
constexpr Rgb kDark{0.08f, 0.07f, 0.07f};
constexpr Rgb kBrow{0.2f, 0.15f, 0.12f};
constexpr Rgb kLip{0.3f, 0.12f, 0.12f};
constexpr Rgb kTeeth{0.97f, 0.97f, 0.95f};

float sq(float v) { return v * v; }

enum class MouthPart { none, lip, interior };

MouthPart mouth_part(const FaceGeometry& f, float u, float v) {
  const float t = (u - f.cx) / f.mouth_hw;
  if (std::abs(t) > 1.0f) return MouthPart::none;
  const float center = f.mouth_y + f.mouth_curve * (1.0f - t * t) + f.mouth_skew * t;
  const float half_open = f.mouth_open * std::sqrt(1.0f - t * t);
  const float lip = 0.02f * std::sqrt(1.0f - 0.6f * t * t);
  if (std::abs(v - center) < half_open) return MouthPart::interior;
  if (std::abs(v - center) < half_open + lip) return MouthPart::lip;
  return MouthPart::none;
}

Rgb shade(const FaceGeometry& f, float u, float v) {
  if (sq((u - f.cx) / f.rx) + sq((v - f.cy) / f.ry) > 1.0f) return kBackground;
  Rgb c = f.skin;
  // nose
  if (sq((u - f.cx) / 0.03f) + sq((v - (f.cy + 0.09f)) / 0.05f) <= 1.0f) {
    c = {f.skin.r * 0.8f, f.skin.g * 0.8f, f.skin.b * 0.8f};
  }
  for (float side : {-1.0f, 1.0f}) {
    const float ex = f.cx + side * f.eye_dx;
    if (sq((u - ex) / f.eye_rx) + sq((v - f.eye_y) / f.eye_ry) <= 1.0f) return kDark;
    const float along = (u - ex) / 0.075f;  // -1..1 across the brow
    if (std::abs(along) <= 1.0f) {
      const float inner = 0.5f * (1.0f - side * along);  // 1 at the end nearest the nose
      const float y = f.brow_y + f.brow_tilt * inner;
      if (std::abs(v - y) <= 0.012f) return kBrow;
    }
  }
  switch (mouth_part(f, u, v)) {
    case MouthPart::interior: return kTeeth;
    case MouthPart::lip: return kLip;
    case MouthPart::none: break;
  }
  return c;
}

// Box-filtered supersampling over a 1.5 pixel footprint.
constexpr int kSamples = 5;
constexpr float kFootprint = 1.5f;

template <typename Fn>
void supersample(std::size_t size, Fn&& sample_fn) {
  const float px = 1.0f / static_cast<float>(size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      for (int sy = 0; sy < kSamples; ++sy)
        for (int sx = 0; sx < kSamples; ++sx) {
          const float oy = ((sy + 0.5f) / kSamples - 0.5f) * kFootprint;
          const float ox = ((sx + 0.5f) / kSamples - 0.5f) * kFootprint;
          sample_fn(y, x, (static_cast<float>(x) + 0.5f + ox) * px,
                    (static_cast<float>(y) + 0.5f + oy) * px);
        }
}

void check_range(float v, float lo, float hi, const char* name) {
  if (!(v >= lo && v <= hi)) {
    throw std::invalid_argument(std::string("FaceParams: ") + name + " = " + std::to_string(v) +
                                " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
}

double channel_mean(const Tensor& t, std::size_t c) {
  const std::size_t n = t.dim(1) * t.dim(2);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += t[c * n + i];
  return s / static_cast<double>(n);
}

double channel_std(const Tensor& t, std::size_t c, double mean) {
  const std::size_t n = t.dim(1) * t.dim(2);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += (t[c * n + i] - mean) * (t[c * n + i] - mean);
  return std::sqrt(s / static_cast<double>(n));
}

void append_pairs(const std::vector<FaceImage>& images, const std::vector<std::size_t>& members,
                  FacePairSet& out) {
  std::vector<std::size_t> remap;
  for (std::size_t idx : members) {
    remap.push_back(out.images.size());
    out.images.push_back(images[idx]);
  }
  for (std::size_t a = 0; a < members.size(); ++a)
    for (std::size_t b = 0; b < members.size(); ++b)
      if (a != b) out.pairs.push_back({remap[a], remap[b]});
}

std::map<int, std::vector<std::size_t>> group_by_identity(const std::vector<FaceImage>& images) {
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < images.size(); ++i) by_id[images[i].identity].push_back(i);
  return by_id;
}

}  // namespace

std::string_view to_string(Expression e) {
  switch (e) {
    case Expression::neutral: return "neutral";
    case Expression::smile: return "smile";
    case Expression::disgust: return "disgust";
    case Expression::squint: return "squint";
    case Expression::surprise: return "surprise";
  }
  return "unknown";
}

Expression parse_expression(std::string_view name) {
  for (Expression e : kExpressions)
    if (to_string(e) == name) return e;
  throw std::invalid_argument("unknown expression label '" + std::string(name) + "'");
}

void FaceParams::validate() const {
  using R = IdentityRanges;
  check_range(identity.face_radius, R::face_radius_min, R::face_radius_max, "face_radius");
  check_range(identity.eye_spacing, R::eye_spacing_min, R::eye_spacing_max, "eye_spacing");
  check_range(identity.eye_height, R::eye_height_min, R::eye_height_max, "eye_height");
  check_range(identity.skin_tone, R::skin_tone_min, R::skin_tone_max, "skin_tone");
  check_range(intensity, 0.0f, 1.0f, "intensity");
}

Identity random_identity(std::mt19937_64& rng) {
  using R = IdentityRanges;
  auto draw = [&](float lo, float hi) {
    return lo + (hi - lo) * static_cast<float>(std::generate_canonical<double, 53>(rng));
  };
  Identity id;
  id.face_radius = draw(R::face_radius_min, R::face_radius_max);
  id.eye_spacing = draw(R::eye_spacing_min, R::eye_spacing_max);
  id.eye_height = draw(R::eye_height_min, R::eye_height_max);
  id.skin_tone = draw(R::skin_tone_min, R::skin_tone_max);
  return id;
}

Tensor render_face(const FaceParams& params, std::size_t size, std::size_t channels) {
  params.validate();
  if (channels != 1 && channels != 3) throw std::invalid_argument("render_face: channels must be 1 or 3");
  if (size < 8) throw std::invalid_argument("render_face: size must be >= 8");
  const FaceGeometry geo(params);
  std::vector<Rgb> acc(size * size, Rgb{0, 0, 0});
  supersample(size, [&](std::size_t y, std::size_t x, float u, float v) {
    const Rgb c = shade(geo, u, v);
    Rgb& a = acc[y * size + x];
    a.r += c.r;
    a.g += c.g;
    a.b += c.b;
  });
  Image8 img{size, size, channels, std::vector<std::uint8_t>(size * size * channels)};
  const float norm = 1.0f / (kSamples * kSamples);
  auto to8 = [](float v) { return static_cast<std::uint8_t>(std::clamp(std::round(v * 255.0f), 0.0f, 255.0f)); };
  for (std::size_t i = 0; i < size * size; ++i) {
    const Rgb a{acc[i].r * norm, acc[i].g * norm, acc[i].b * norm};
    if (channels == 1) {
      img.pixels[i] = to8(0.299f * a.r + 0.587f * a.g + 0.114f * a.b);
    } else {
      img.pixels[3 * i + 0] = to8(a.r);
      img.pixels[3 * i + 1] = to8(a.g);
      img.pixels[3 * i + 2] = to8(a.b);
    }
  }
  return normalize(img);
}

Tensor mouth_interior_mask(const FaceParams& params, std::size_t size) {
  params.validate();
  const FaceGeometry geo(params);
  Tensor cover(Shape{1, size, size});
  supersample(size, [&](std::size_t y, std::size_t x, float u, float v) {
    if (mouth_part(geo, u, v) == MouthPart::interior) cover.at(0, y, x) += 1.0f;
  });
  for (auto& c : cover.data()) c = c >= 0.5f * kSamples * kSamples ? 1.0f : 0.0f;
  return cover;
}

std::vector<int> FacePairSet::identities() const {
  std::vector<int> ids;
  for (const auto& img : images) ids.push_back(img.identity);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

DatasetSplit build_pairs(std::vector<FaceImage> images, std::uint64_t split_seed,
                         double train_fraction) {
  const auto by_id = group_by_identity(images);
  if (by_id.size() < 5) {
    throw std::invalid_argument("build_pairs: need at least 5 identities, got " +
                                std::to_string(by_id.size()));
  }
  std::vector<int> ids;
  for (const auto& [id, members] : by_id) ids.push_back(id);
  std::mt19937_64 rng(split_seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto n = static_cast<long>(ids.size());
  const long n_train = std::clamp(std::lround(train_fraction * static_cast<double>(n)), 1L, n - 1);
  std::vector<int> train_ids(ids.begin(), ids.begin() + n_train);
  std::vector<int> test_ids(ids.begin() + n_train, ids.end());
  std::sort(train_ids.begin(), train_ids.end());
  std::sort(test_ids.begin(), test_ids.end());

  DatasetSplit split;
  for (int id : train_ids) append_pairs(images, by_id.at(id), split.train);
  for (int id : test_ids) append_pairs(images, by_id.at(id), split.test);
  return split;
}

FacePairSet all_pairs(std::vector<FaceImage> images) {
  FacePairSet set;
  for (const auto& [id, members] : group_by_identity(images)) append_pairs(images, members, set);
  return set;
}

std::vector<Identity> synth_identities(const SynthConfig& config) {
  std::mt19937_64 rng(config.seed);
  std::vector<Identity> out;
  for (int i = 0; i < config.identities; ++i) out.push_back(random_identity(rng));
  return out;
}

std::vector<FaceImage> render_dataset(const SynthConfig& config) {
  std::vector<FaceImage> images;
  const auto ids = synth_identities(config);
  for (int i = 0; i < config.identities; ++i)
    for (Expression e : kExpressions) {
      images.push_back({i, e, render_face({ids[i], e, 1.0f}, config.image_size, config.channels)});
    }
  return images;
}

Tensor color_transfer(const Tensor& source, const Tensor& target, float lo, float hi) {
  if (source.rank() != 3 || target.rank() != 3 || source.dim(0) != target.dim(0)) {
    throw std::invalid_argument("color_transfer: channel counts differ: " +
                                shape_string(source.shape()) + " vs " + shape_string(target.shape()));
  }
  Tensor out(source.shape());
  const std::size_t n = source.dim(1) * source.dim(2);
  for (std::size_t c = 0; c < source.dim(0); ++c) {
    const double ms = channel_mean(source, c), mt = channel_mean(target, c);
    const double ss = channel_std(source, c, ms), st = channel_std(target, c, mt);
    const double gain = ss < 1e-6 ? 1.0 : st / ss;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = (source[c * n + i] - ms) * gain + mt;
      out[c * n + i] = std::clamp(static_cast<float>(v), lo, hi);
    }
  }
  return out;
}

Tensor hflip(const Tensor& chw) {
  Tensor out(chw.shape());
  const std::size_t C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out.at(c, y, x) = chw.at(c, y, W - 1 - x);
  return out;
}

ImagePair hflip_augment(ImagePair pair, std::mt19937_64& rng) {
  if (std::bernoulli_distribution(0.5)(rng)) {
    pair.source = hflip(pair.source);
    pair.target = hflip(pair.target);
  }
  return pair;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::string text;
  for (const auto& r : records) {
    text += std::to_string(r.identity) + '\t' + std::string(to_string(r.source_label)) + '\t' +
            std::string(to_string(r.target_label)) + '\t' + r.source_path.generic_string() + '\t' +
            r.target_path.generic_string() + '\n';
  }
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest '" + path.string() + "'");
  std::vector<ManifestRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 5) {
      throw std::runtime_error("manifest line " + std::to_string(line_no) + ": expected 5 fields, got " +
                               std::to_string(fields.size()));
    }
    ManifestRecord r;
    try {
      r.identity = std::stoi(fields[0]);
      r.source_label = parse_expression(fields[1]);
      r.target_label = parse_expression(fields[2]);
    } catch (const std::exception& e) {
      throw std::runtime_error("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    r.source_path = fields[3];
    r.target_path = fields[4];
    records.push_back(std::move(r));
  }
  return records;
}

FacePairSet load_manifest_pairs(const std::filesystem::path& manifest) {
  const auto records = read_manifest(manifest);
  const auto base = manifest.parent_path();
  FacePairSet set;
  std::map<std::string, std::size_t> loaded;
  auto load = [&](const std::filesystem::path& rel, int identity, Expression label) {
    const std::string key = rel.generic_string();
    if (auto it = loaded.find(key); it != loaded.end()) return it->second;
    set.images.push_back({identity, label, normalize(read_image(base / rel))});
    loaded[key] = set.images.size() - 1;
    return set.images.size() - 1;
  };
  for (const auto& r : records) {
    const std::size_t s = load(r.source_path, r.identity, r.source_label);
    const std::size_t t = load(r.target_path, r.identity, r.target_label);
    set.pairs.push_back({s, t});
  }
  return set;
}

}  // namespace fvae
