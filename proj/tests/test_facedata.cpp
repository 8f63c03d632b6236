#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "doctest.h"
#include "fvae/facedata.hpp"
#include "fvae/image_io.hpp"

using namespace fvae;

namespace {

std::vector<FaceImage> dataset_stub(int identities) {
  std::vector<FaceImage> images;
  for (int i = 0; i < identities; ++i)
    for (Expression e : kExpressions) images.push_back({i, e, Tensor(Shape{1, 2, 2})});
  return images;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("fvae_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

double mean_of(const Tensor& t) {
  double s = 0;
  for (float v : t.data()) s += v;
  return s / static_cast<double>(t.size());
}

double std_of(const Tensor& t) {
  const double m = mean_of(t);
  double s = 0;
  for (float v : t.data()) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(t.size()));
}

}  // namespace

TEST_SUITE("facedata") {

TEST_CASE("render_face is deterministic and in range") {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 5; ++k) {
    const FaceParams p{random_identity(rng), kExpressions[k], 1.0f};
    const Tensor a = render_face(p, 32);
    CHECK(a == render_face(p, 32));
    for (float v : a.data()) {
      CHECK(v >= -1.0f);
      CHECK(v <= 1.0f);
    }
  }
  CHECK(render_face({}, 16, 3).shape() == Shape{3, 16, 16});
}

TEST_CASE("render_face output survives an 8-bit round trip") {
  const Tensor a = render_face({Identity{}, Expression::surprise, 0.7f}, 24, 3);
  CHECK(normalize(denormalize(a)) == a);
}

TEST_CASE("intensity 0 renders neutral") {
  std::mt19937_64 rng(5);
  const Identity id = random_identity(rng);
  const Tensor neutral = render_face({id, Expression::neutral, 1.0f}, 32);
  for (Expression e : kExpressions) CHECK(render_face({id, e, 0.0f}, 32) == neutral);
}

TEST_CASE("expressions differ from neutral") {
  const Tensor neutral = render_face({}, 32);
  for (Expression e : kExpressions) {
    if (e == Expression::neutral) continue;
    CHECK(render_face({Identity{}, e, 1.0f}, 32) != neutral);
  }
}

TEST_CASE("smile changes only the mouth region") {
  const std::size_t size = 64;
  const Identity id{};
  const Tensor a = render_face({id, Expression::smile, 0.0f}, size);
  const Tensor b = render_face({id, Expression::smile, 1.0f}, size);
  // Mouth box in canvas units: centre line 0.5 + 0.56 r, half width <= 0.155 plus a
  // 0.1 margin for curvature, lips and the supersampling footprint.
  const double mouth_y = 0.5 + 0.5 * 1.12 * id.face_radius;
  double mouth_diff = 0, other_diff = 0;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (x + 0.5) / size, v = (y + 0.5) / size;
      const double d = std::abs(a.at(0, y, x) - b.at(0, y, x));
      const bool in_mouth = std::abs(u - 0.5) < 0.2 && std::abs(v - mouth_y) < 0.1;
      (in_mouth ? mouth_diff : other_diff) += d;
    }
  CHECK(mouth_diff > 0.0);
  CHECK(other_diff == 0.0);
}

TEST_CASE("surprise exposes mouth interior absent in neutral") {
  const Identity id{};
  const Tensor open = mouth_interior_mask({id, Expression::surprise, 1.0f}, 32);
  const Tensor closed = mouth_interior_mask({id, Expression::neutral, 1.0f}, 32);
  CHECK(mean_of(open) > 0.0);
  CHECK(mean_of(closed) == 0.0);
  const Tensor img = render_face({id, Expression::surprise, 1.0f}, 32);
  const Tensor neutral = render_face({id, Expression::neutral, 1.0f}, 32);
  // the teeth are the brightest content in the image
  float brightest_neutral = -1.0f;
  for (float v : neutral.data()) brightest_neutral = std::max(brightest_neutral, v);
  for (std::size_t i = 0; i < open.size(); ++i)
    if (open[i] == 1.0f) CHECK(img[i] > brightest_neutral);
}

TEST_CASE("out-of-range parameters are rejected") {
  FaceParams p;
  p.intensity = 1.5f;
  CHECK_THROWS_WITH_AS(render_face(p, 32), doctest::Contains("intensity"), std::invalid_argument);
  p = {};
  p.identity.face_radius = 0.6f;
  CHECK_THROWS_WITH_AS(render_face(p, 32), doctest::Contains("face_radius"), std::invalid_argument);
}

TEST_CASE("random identities stay in range and geometry stays in canvas") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const FaceParams p{random_identity(rng), kExpressions[i % 5], 1.0f};
    CHECK_NOTHROW(p.validate());
  }
  // widest head touches no border pixel
  FaceParams wide;
  wide.identity.face_radius = IdentityRanges::face_radius_max;
  wide.identity.skin_tone = IdentityRanges::skin_tone_max;
  const Tensor img = render_face(wide, 32);
  const float bg = img.at(0, 0, 0);
  for (std::size_t k = 0; k < 32; ++k) {
    CHECK(img.at(0, 0, k) == bg);
    CHECK(img.at(0, 31, k) == bg);
    CHECK(img.at(0, k, 0) == bg);
    CHECK(img.at(0, k, 31) == bg);
  }
}

TEST_CASE("build_pairs counts and split") {
  const auto split = build_pairs(dataset_stub(10), 42);
  CHECK(split.train.identities().size() == 8);
  CHECK(split.test.identities().size() == 2);
  CHECK(split.train.pairs.size() == 8 * 20);
  CHECK(split.test.pairs.size() == 2 * 20);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = build_pairs(dataset_stub(10), seed);
    CHECK(s.train.identities().size() == 8);
    const auto tr = s.train.identities(), te = s.test.identities();
    std::set<int> both(tr.begin(), tr.end());
    for (int id : te) CHECK(both.count(id) == 0);
  }
}

TEST_CASE("every pair shares identity and differs in expression") {
  const auto split = build_pairs(dataset_stub(7), 1);
  for (const FacePairSet* set : {&split.train, &split.test}) {
    std::set<std::pair<int, int>> seen;
    for (std::size_t i = 0; i < set->pairs.size(); ++i) {
      CHECK(set->source(i).identity == set->target(i).identity);
      CHECK(set->source(i).label != set->target(i).label);
      seen.insert({static_cast<int>(set->source(i).label) * 10 + set->source(i).identity,
                   static_cast<int>(set->target(i).label)});
    }
    CHECK(seen.size() == set->pairs.size());
  }
}

TEST_CASE("build_pairs is deterministic and seed dependent") {
  const auto a = build_pairs(dataset_stub(20), 9);
  const auto b = build_pairs(dataset_stub(20), 9);
  CHECK(a.test.identities() == b.test.identities());
  bool any_differs = false;
  for (std::uint64_t s = 10; s < 20; ++s)
    any_differs |= build_pairs(dataset_stub(20), s).test.identities() != a.test.identities();
  CHECK(any_differs);
}

TEST_CASE("build_pairs needs five identities") {
  CHECK_THROWS_AS(build_pairs(dataset_stub(4), 0), std::invalid_argument);
  CHECK(all_pairs(dataset_stub(1)).pairs.size() == 20);
}

TEST_CASE("render_dataset") {
  SynthConfig cfg;
  cfg.identities = 3;
  cfg.image_size = 16;
  const auto images = render_dataset(cfg);
  CHECK(images.size() == 15);
  CHECK(images[7].identity == 1);
  CHECK(images[7].label == Expression::disgust);
  CHECK(images[0].pixels.shape() == Shape{1, 16, 16});
  CHECK(render_dataset(cfg)[4].pixels == images[4].pixels);
}

TEST_CASE("color_transfer examples") {
  SUBCASE("constant source shifts to target mean") {
    const Tensor src(Shape{1, 2, 2}, std::vector<float>(4, 0.2f));
    const Tensor tgt(Shape{1, 2, 2}, std::vector<float>{0.4f, 0.8f, 0.5f, 0.7f});
    const Tensor out = color_transfer(src, tgt);
    for (float v : out.data()) CHECK(v == doctest::Approx(0.6).epsilon(1e-6));
  }
  SUBCASE("hand-evaluated affine map") {
    // src mean 0 std 1, tgt mean 1 std 2
    const float r = std::sqrt(1.75f);
    const Tensor src_unit(Shape{1, 1, 4}, std::vector<float>{-r, -0.5f, 0.5f, r});
    CHECK(mean_of(src_unit) == doctest::Approx(0.0).epsilon(1e-7));
    CHECK(std_of(src_unit) == doctest::Approx(1.0).epsilon(1e-6));
    const Tensor tgt(Shape{1, 1, 2}, std::vector<float>{-1.0f, 3.0f});
    const Tensor out = color_transfer(src_unit, tgt, -INFINITY, INFINITY);
    CHECK(out[2] == doctest::Approx(2.0).epsilon(1e-6));
  }
  SUBCASE("matching stats are a fixed point") {
    std::mt19937_64 rng(2);
    const Tensor a = render_face({random_identity(rng), Expression::smile, 1.0f}, 16, 3);
    const Tensor out = color_transfer(a, a);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(out[i] == doctest::Approx(a[i]).epsilon(1e-5));
  }
  CHECK_THROWS_AS(color_transfer(Tensor(Shape{1, 2, 2}), Tensor(Shape{3, 2, 2})),
                  std::invalid_argument);
}

TEST_CASE("color_transfer matches target statistics when unclamped") {
  std::mt19937_64 rng(8);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor src(Shape{3, 8, 8}), tgt(Shape{3, 6, 10});
    for (auto& v : src.data()) v = 0.3f * n(rng) - 0.1f;
    for (auto& v : tgt.data()) v = 0.7f * n(rng) + 0.4f;
    const Tensor out = color_transfer(src, tgt, -INFINITY, INFINITY);
    for (std::size_t c = 0; c < 3; ++c) {
      const Tensor oc = batch_item(Tensor(Shape{3, 1, 64}, out.storage()), c);
      const Tensor tc = batch_item(Tensor(Shape{3, 1, 60}, tgt.storage()), c);
      CHECK(std::abs(mean_of(oc) - mean_of(tc)) < 1e-4);
      CHECK(std::abs(std_of(oc) - std_of(tc)) < 1e-3);
    }
  }
}

TEST_CASE("hflip is an involution and flips pairs together") {
  std::mt19937_64 rng(4);
  const Tensor a = render_face({random_identity(rng), Expression::disgust, 1.0f}, 16, 3);
  CHECK(hflip(hflip(a)) == a);
  CHECK(hflip(a) != a);

  const ImagePair pair{a, hflip(a)};
  std::mt19937_64 r1(77), r2(77);
  int flips = 0;
  for (int i = 0; i < 200; ++i) {
    const ImagePair out = hflip_augment(pair, r1);
    const bool flipped = out.source != a;
    flips += flipped;
    CHECK((out.target != pair.target) == flipped);
    CHECK(hflip_augment(pair, r2).source == out.source);
  }
  CHECK(flips > 70);
  CHECK(flips < 130);
}

TEST_CASE("normalize and denormalize") {
  Image8 img{256, 1, 1, {}};
  for (int v = 0; v < 256; ++v) img.pixels.push_back(static_cast<std::uint8_t>(v));
  const Tensor t = normalize(img);
  CHECK(t[0] == -1.0f);
  CHECK(t[255] == 1.0f);
  CHECK(t[128] == doctest::Approx(128.0 / 127.5 - 1.0).epsilon(1e-6));
  CHECK(t[128] == doctest::Approx(0.00392157).epsilon(1e-4));
  CHECK(denormalize(t) == img);
  std::set<float> distinct(t.data().begin(), t.data().end());
  CHECK(distinct.size() == 256);

  const Tensor wild(Shape{1, 1, 3}, std::vector<float>{-3.0f, 5.0f, 0.0f});
  const Image8 clamped = denormalize(wild);
  CHECK(clamped.pixels == std::vector<std::uint8_t>{0, 255, 128});
}

TEST_CASE("PGM byte layout and round trip") {
  const Image8 white{2, 1, 1, {255, 255}};
  const auto bytes = encode_pnm(white);
  const std::string header = "P5\n2 1\n255\n";
  std::vector<std::uint8_t> expected(header.begin(), header.end());
  expected.push_back(0xFF);
  expected.push_back(0xFF);
  CHECK(bytes == expected);
  CHECK(decode_pnm(bytes) == white);

  const auto dir = scratch_dir("pnm");
  const Image8 rgb = denormalize(render_face({}, 12, 3));
  write_image(dir / "face.ppm", rgb);
  CHECK(read_image(dir / "face.ppm") == rgb);
  std::filesystem::remove_all(dir);
}

TEST_CASE("PNM parse errors") {
  auto as_bytes = [](const std::string& s) { return std::vector<std::uint8_t>(s.begin(), s.end()); };
  CHECK_THROWS_AS(decode_pnm(as_bytes("P6\n1 1\n65535\n\0\0\0\0\0\0")), ParseError);
  try {
    decode_pnm(as_bytes("P6\n1 1\n65535\n"));
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 7);
  }
  CHECK_THROWS_AS(decode_pnm(as_bytes("P3\n1 1\n255\n")), ParseError);
  try {
    decode_pnm(as_bytes("P5\n2 2\n255\n\x01\x02"));
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 13);
  }
  const auto commented = decode_pnm(as_bytes("P5\n# made by hand\n1 1\n255\n\x07"));
  CHECK(commented.pixels == std::vector<std::uint8_t>{7});
}

TEST_CASE("manifest round trip and loading") {
  const auto dir = scratch_dir("manifest");
  SynthConfig cfg;
  cfg.identities = 1;
  cfg.image_size = 8;
  const auto images = render_dataset(cfg);
  std::vector<ManifestRecord> records;
  for (const auto& img : images) write_image(dir / (std::string(to_string(img.label)) + ".pgm"), denormalize(img.pixels));
  for (const auto& s : images)
    for (const auto& t : images)
      if (s.label != t.label)
        records.push_back({0, s.label, t.label, std::string(to_string(s.label)) + ".pgm",
                           std::string(to_string(t.label)) + ".pgm"});
  write_manifest(dir / "pairs.tsv", records);
  CHECK(read_manifest(dir / "pairs.tsv") == records);

  const FacePairSet set = load_manifest_pairs(dir / "pairs.tsv");
  CHECK(set.images.size() == 5);
  CHECK(set.pairs.size() == 20);
  for (std::size_t i = 0; i < set.pairs.size(); ++i) {
    CHECK(set.source(i).pixels == images[static_cast<std::size_t>(set.source(i).label)].pixels);
  }
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
