#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "fvae/binary_io.hpp"
#include "fvae/checkpoint.hpp"
#include "fvae/config.hpp"
#include "fvae/train.hpp"
#include "test_util.hpp"

using namespace fvae;
using fvae::testing::random_tensor_f;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.image_size = 16;
  c.widths = {8, 16};
  c.latent_channels = 4;
  return c;
}

TrainConfig small_train() {
  TrainConfig t;
  t.batch_size = 4;
  t.max_steps = 6;
  t.mask_steps = 3;
  t.validation_fraction = 0;
  t.checkpoint_interval = 0;
  t.log_interval = 2;
  return t;
}

const DatasetSplit& small_data() {
  static const DatasetSplit split = [] {
    SynthConfig sc;
    sc.identities = 6;
    sc.image_size = 16;
    return build_pairs(render_dataset(sc), 3);
  }();
  return split;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("fvae_model_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

float max_abs(const Tensor& t) {
  float m = 0;
  for (float v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

bool all_zero(const std::vector<Parameter<float>*>& params) {
  for (auto* p : params)
    for (float v : p->grad.data())
      if (v != 0.0f) return false;
  return true;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("ModelConfig validation") {
  CHECK_NOTHROW(ModelConfig{}.validate());
  CHECK_NOTHROW(ModelConfig::full_scale().validate());
  CHECK(ModelConfig::full_scale().latent_shape(1) == Shape{1, 1024, 4, 4});
  CHECK(ModelConfig{}.latent_shape(2) == Shape{2, 32, 2, 2});
  ModelConfig c;
  c.image_size = 48;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.widths = {4, 4, 4, 4, 4, 4};
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("stages"), std::invalid_argument);
  c = {};
  c.channels = 2;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("shapes and ranges of every head") {
  FlowModel<float> model(small_model(), 3);
  std::mt19937_64 rng(1);
  const Tensor s = random_tensor_f(Shape{2, 1, 16, 16}, rng);
  const Tensor t = random_tensor_f(Shape{2, 1, 16, 16}, rng);
  const LatentCode code = encode(model, t);
  CHECK(code.mu.shape() == Shape{2, 4, 4, 4});
  CHECK(code.log_var.shape() == Shape{2, 4, 4, 4});
  const Decoded d = decode(model, s, code.mu);
  CHECK(d.flows.shape() == Shape{2, 2, 16, 16});
  CHECK(d.warped.shape() == s.shape());
  CHECK(max_abs(d.flows) <= 1.0f);
  const Tensor m = predict_mask(model, s, code.mu);
  CHECK(m.shape() == Shape{2, 1, 16, 16});
  for (float v : m.data()) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
  for (std::size_t n = 0; n < 2; ++n) {
    const Tensor src = batch_item(s, n), out = batch_item(d.warped, n);
    const float lo = *std::min_element(src.data().begin(), src.data().end());
    const float hi = *std::max_element(src.data().begin(), src.data().end());
    for (float v : out.data()) {
      CHECK(v >= lo);
      CHECK(v <= hi);
    }
  }
}

TEST_CASE("inference is deterministic") {
  FlowModel<float> model(small_model(), 3);
  std::mt19937_64 rng(2);
  const Tensor t = random_tensor_f(Shape{1, 16, 16}, rng);
  CHECK(encode(model, t).mu == encode(model, t).mu);
  const Tensor z = encode(model, t).mu;
  CHECK(decode(model, t, z).warped == decode(model, t, z).warped);
  CHECK(predict_mask(model, t, z) == predict_mask(model, t, z));
  CHECK(FlowModel<float>(small_model(), 3).params().tensors().size() ==
        model.params().tensors().size());
}

TEST_CASE("fresh encoder gives small mu") {
  FlowModel<float> model(ModelConfig{}, 1);
  CHECK(max_abs(encode(model, Tensor(Shape{1, 1, 32, 32})).mu) < 0.5f);
  std::mt19937_64 rng(5);
  CHECK(max_abs(encode(model, random_tensor_f(Shape{1, 1, 32, 32}, rng)).mu) < 0.5f);
}

TEST_CASE("decoder starts near the identity warp") {
  FlowModel<float> model(small_model(), 4);
  std::mt19937_64 rng(6);
  const Tensor s = random_tensor_f(Shape{1, 1, 16, 16}, rng);
  const Tensor flows = decode(model, s, Tensor(small_model().latent_shape(1))).flows;
  const Tensor grid = flows_to_batch(std::vector{identity_flow(16, 16)});
  float worst = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) worst = std::max(worst, std::abs(flows[i] - grid[i]));
  CHECK(worst < 0.05f);
}

TEST_CASE("forced identity flow reproduces the source") {
  ModelConfig c = small_model();
  c.force_identity_flow = true;
  FlowModel<float> model(c, 1);
  std::mt19937_64 rng(7);
  const Tensor s = random_tensor_f(Shape{1, 16, 16}, rng);
  CHECK(batch_item(decode(model, s, Tensor(c.latent_shape(1))).warped, 0) == s);
}

TEST_CASE("wrong extents are rejected") {
  FlowModel<float> model(small_model(), 1);
  CHECK_THROWS_WITH_AS(encode(model, Tensor(Shape{1, 1, 8, 8})), doctest::Contains("1x1x16x16"),
                       std::invalid_argument);
  CHECK_THROWS_AS(decode(model, Tensor(Shape{1, 1, 16, 16}), Tensor(Shape{1, 4, 2, 2})),
                  std::invalid_argument);
  CHECK_THROWS_AS(predict_mask(model, Tensor(Shape{1, 3, 16, 16}), Tensor(Shape{1, 4, 4, 4})),
                  std::invalid_argument);
}

TEST_CASE("reparameterize statistics") {
  const Tensor mu(Shape{100000}), lv(Shape{100000});
  std::mt19937_64 rng(11);
  const Tensor z = reparameterize(mu, lv, rng);
  double mean = 0, var = 0;
  for (float v : z.data()) mean += v;
  mean /= z.size();
  for (float v : z.data()) var += (v - mean) * (v - mean);
  var /= z.size();
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.02);

  std::mt19937_64 a(3), b(3);
  CHECK(reparameterize(mu, lv, a) == reparameterize(mu, lv, b));

  // zero noise is the deterministic limit
  Graph<float> g;
  const Tensor m = random_tensor_f(Shape{2, 3}, rng);
  const Var out = nn::reparameterize(g, g.constant(m), g.constant(random_tensor_f(Shape{2, 3}, rng)),
                                     Tensor(Shape{2, 3}));
  CHECK(g.value(out) == m);
  CHECK_THROWS_AS(reparameterize(mu, Tensor(Shape{3}), rng), std::invalid_argument);
}

TEST_CASE("end-to-end gradients match finite differences") {
  ModelConfig tiny;
  tiny.image_size = 8;
  tiny.widths = {3, 4};
  tiny.latent_channels = 2;
  tiny.init_stddev = 0.3f;
  FlowModel<double> model(tiny, 2);
  std::mt19937_64 rng(8);
  const auto s = fvae::testing::random_tensor(tiny.image_shape(2), rng);
  const auto t = fvae::testing::random_tensor(tiny.image_shape(2), rng);
  const auto noise = fvae::testing::random_tensor(tiny.latent_shape(2), rng);
  auto params = model.params().trainable("encoder.");
  for (auto* p : model.params().trainable("decoder.")) params.push_back(p);
  for (auto* p : params) p->zero_grad();
  auto objective = [&](Graph<double>& g, Binding b) {
    return fvae_objective(g, model, s, t, noise, LossWeights{}, nn::Mode::train, b).total;
  };
  {
    Graph<double> g;
    g.backward(objective(g, Binding::trainable));
  }
  std::vector<double> point, analytic;
  for (auto* p : params) {
    point.insert(point.end(), p->value.data().begin(), p->value.data().end());
    analytic.insert(analytic.end(), p->grad.data().begin(), p->grad.data().end());
  }
  auto f = [&](std::span<const double> x) {
    std::size_t off = 0;
    for (auto* p : params)
      for (auto& v : p->value.data()) v = x[off++];
    Graph<double> g;
    return g.value(objective(g, Binding::frozen)).item();
  };
  // every third coordinate keeps the unit suite quick; the acceptance gate checks all
  std::vector<std::size_t> coords;
  for (std::size_t i = 0; i < point.size(); i += 3) coords.push_back(i);
  CHECK(finite_diff_check(f, point, analytic, 1e-6, coords).max_relative_error < 1e-4);
}

TEST_CASE("train_step is deterministic") {
  const auto& data = small_data();
  TrainingState a(small_model(), small_train()), b(small_model(), small_train());
  for (int i = 0; i < 3; ++i) {
    const Batch ba = sample_batch(data.train, a.config, a.rng);
    const Batch bb = sample_batch(data.train, b.config, b.rng);
    CHECK(ba.source == bb.source);
    CHECK(train_step(a, ba) == train_step(b, bb));
  }
  CHECK(a.step == 3);
  CHECK(a.adam.step == 3);
}

TEST_CASE("zero loss weights leave only reconstruction") {
  TrainConfig tc = small_train();
  tc.loss.lambda_prior = 0;
  tc.loss.lambda_flow = 0;
  TrainingState st(small_model(), tc);
  const StepMetrics m = train_step(st, sample_batch(small_data().train, tc, st.rng));
  CHECK(m.total == m.recon);
  CHECK(m.prior > 0);
}

TEST_CASE("training lowers the loss on a fixed batch") {
  TrainConfig tc = small_train();
  tc.adam.learning_rate = 1e-3f;
  TrainingState st(small_model(), tc);
  std::mt19937_64 rng(1);
  const Batch batch = sample_batch(small_data().train, tc, rng);
  const double first = train_step(st, batch).recon;
  double last = first;
  for (int i = 0; i < 40; ++i) last = train_step(st, batch).recon;
  CHECK(last < 0.8 * first);
}

TEST_CASE("non-finite loss aborts before the update") {
  TrainingState st(small_model(), small_train());
  // mu^2 overflows in the prior term while everything upstream stays finite
  st.model.params().param("encoder.mu.bias").value.fill(2e19f);
  const Tensor before = st.model.params().param("decoder.head.kernel").value;
  const Batch batch = sample_batch(small_data().train, st.config, st.rng);
  CHECK_THROWS_WITH_AS(train_step(st, batch), doctest::Contains("prior"), NonFiniteLoss);
  CHECK(st.step == 0);
  CHECK(st.model.params().param("decoder.head.kernel").value == before);
}

TEST_CASE("mask step leaves the frozen networks untouched") {
  TrainingState st(small_model(), small_train());
  const auto frozen = [&] {
    auto p = st.model.params().trainable("encoder.");
    for (auto* q : st.model.params().trainable("decoder.")) p.push_back(q);
    return p;
  }();
  const Tensor enc_before = st.model.params().param("encoder.mu.kernel").value;
  const Tensor bn_before = st.model.params().batch_norm("decoder.stage_bn0").state.running_mean;
  for (auto* p : frozen) p->zero_grad();
  const Batch batch = sample_batch(small_data().train, st.config, st.rng);
  const Tensor mask_before = st.model.params().param("mask.head.kernel").value;
  train_mask_step(st, batch);
  CHECK(all_zero(frozen));
  CHECK(st.model.params().param("encoder.mu.kernel").value == enc_before);
  CHECK(st.model.params().batch_norm("decoder.stage_bn0").state.running_mean == bn_before);
  CHECK(st.model.params().param("mask.head.kernel").value != mask_before);
  CHECK(st.mask_step == 1);
}

TEST_CASE("perfect reconstructions drive the mask up") {
  ModelConfig c = small_model();
  c.force_identity_flow = true;
  TrainingState st(c, small_train());
  const Batch b = sample_batch(small_data().train, st.config, st.rng);
  const Batch same{b.source, b.source};
  // measured with batch statistics, as the mask net sees them while training
  auto mean_mask = [&] {
    FlowModel<float> probe = st.model;
    Graph<float> g;
    const Var m = probe.predict_mask(g, g.constant(same.source), g.constant(encode(probe, same.target).mu),
                                     nn::Mode::train, Binding::frozen);
    double s = 0;
    for (float v : g.value(m).data()) s += v;
    return s / g.value(m).size();
  };
  const double before = mean_mask();
  const double first_loss = train_mask_step(st, same);
  double last_loss = first_loss;
  for (int i = 1; i < 50; ++i) last_loss = train_mask_step(st, same);
  CHECK(mean_mask() > before + 0.05);
  CHECK(last_loss < first_loss);
}

TEST_CASE("early stopping bookkeeping") {
  EarlyStopState es;
  CHECK(record_validation(es, 5.0, 2));
  CHECK(record_validation(es, 4.0, 2));
  CHECK_FALSE(record_validation(es, 4.0, 2));
  CHECK_FALSE(es.stopped);
  CHECK_FALSE(record_validation(es, 4.5, 2));
  CHECK(es.stopped);
  EarlyStopState never;
  for (int i = 0; i < 20; ++i) record_validation(never, 1.0, 0);
  CHECK_FALSE(never.stopped);
}

TEST_CASE("run_training with no steps trains nothing") {
  const auto& data = small_data();
  TrainConfig tc = small_train();
  tc.max_steps = 0;
  TrainingState st(small_model(), tc);
  const auto before = encode_checkpoint(st);
  int logs = 0;
  run_training(st, data.train, data.test, {{}, [&](const LogRow&) { ++logs; }, {}});
  CHECK(st.done());
  CHECK(st.mask_step == 0);
  CHECK(logs == 0);
  CHECK(encode_checkpoint(st) == before);
}

TEST_CASE("run_training stops early and logs on schedule") {
  const auto& data = small_data();
  TrainConfig tc = small_train();
  tc.max_steps = 40;
  tc.eval_interval = 2;
  tc.patience = 1;
  tc.adam.learning_rate = 0.05f;  // large steps make the validation loss wander
  TrainingState st(small_model(), tc);
  std::vector<LogRow> rows;
  run_training(st, data.train, data.test, {{}, [&](const LogRow& r) { rows.push_back(r); }, {}});
  CHECK(st.early_stop.stopped);
  CHECK(st.step < 40);
  CHECK(st.mask_step == 3);
  CHECK(st.done());
  std::size_t fvae_rows = 0, mask_rows = 0;
  for (const auto& r : rows) {
    fvae_rows += r.fvae.has_value();
    mask_rows += r.mask_loss.has_value();
    if (r.fvae) CHECK(r.val_total.has_value());
  }
  CHECK(fvae_rows == static_cast<std::size_t>(st.step / 2));
  CHECK(mask_rows == 1);
}

TEST_CASE("validation split carves whole identities out of training") {
  TrainConfig tc;
  const auto split = validation_split(small_data().train, tc);
  CHECK(split.train.identities().size() + split.test.identities().size() ==
        small_data().train.identities().size());
  CHECK_FALSE(split.test.pairs.empty());
  tc.validation_fraction = 0;
  CHECK(validation_split(small_data().train, tc).test.pairs.empty());
}

TEST_CASE("checkpoint round trip is byte exact") {
  TrainingState st(small_model(), small_train());
  for (int i = 0; i < 2; ++i) train_step(st, sample_batch(small_data().train, st.config, st.rng));
  train_mask_step(st, sample_batch(small_data().train, st.config, st.rng));
  st.early_stop.best = 1.0 / 3.0;
  const auto bytes = encode_checkpoint(st);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "FVAE");
  TrainingState back = decode_checkpoint(bytes);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(back.step == 2);
  CHECK(back.mask_step == 1);
  CHECK(*back.early_stop.best == 1.0 / 3.0);
  CHECK(back.model.params().param("decoder.head.kernel").value ==
        st.model.params().param("decoder.head.kernel").value);

  const auto dir = scratch("ckpt");
  save_checkpoint(st, dir / "a.fvae");
  TrainingState loaded = load_checkpoint(dir / "a.fvae");
  save_checkpoint(loaded, dir / "b.fvae");
  CHECK(read_file_bytes(dir / "a.fvae") == read_file_bytes(dir / "b.fvae"));
  CHECK_FALSE(std::filesystem::exists(dir / "a.fvae.tmp"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("resuming from a checkpoint continues the same trajectory") {
  const auto& data = small_data();
  TrainingState whole(small_model(), small_train());
  std::vector<StepMetrics> expected;
  for (int i = 0; i < 6; ++i) expected.push_back(train_step(whole, sample_batch(data.train, whole.config, whole.rng)));

  TrainingState part(small_model(), small_train());
  for (int i = 0; i < 3; ++i) train_step(part, sample_batch(data.train, part.config, part.rng));
  TrainingState resumed = decode_checkpoint(encode_checkpoint(part));
  for (int i = 3; i < 6; ++i) {
    CHECK(train_step(resumed, sample_batch(data.train, resumed.config, resumed.rng)) == expected[i]);
  }
  CHECK(encode_checkpoint(resumed) == encode_checkpoint(whole));
}

TEST_CASE("malformed checkpoints are rejected") {
  TrainingState st(small_model(), small_train());
  const auto bytes = encode_checkpoint(st);
  SUBCASE("truncated") {
    for (std::size_t cut : {std::size_t(3), std::size_t(10), bytes.size() / 2, bytes.size() - 1}) {
      CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(cut)), ParseError);
    }
  }
  SUBCASE("bad magic") {
    auto b = bytes;
    b[0] = 'X';
    CHECK_THROWS_WITH_AS(decode_checkpoint(b), doctest::Contains("magic"), ParseError);
  }
  SUBCASE("version") {
    auto b = bytes;
    b[4] = 9;
    try {
      decode_checkpoint(b);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("version 9") != std::string::npos);
      CHECK(e.offset() == 4);
    }
  }
  SUBCASE("trailing bytes") {
    auto b = bytes;
    b.push_back(0);
    CHECK_THROWS_WITH_AS(decode_checkpoint(b), doctest::Contains("trailing"), ParseError);
  }
  SUBCASE("architecture mismatch") {
    ModelConfig other = small_model();
    other.widths = {8, 8};
    TrainingState o(other, small_train());
    auto b = encode_checkpoint(o);
    // splice the small_model header onto the other model's tensors
    ByteReader ra(bytes), rb(b);
    ra.raw(8);
    rb.raw(8);
    const std::string ha = ra.string();
    rb.string();
    ByteWriter w;
    w.raw("FVAE");
    w.u32(kCheckpointVersion);
    w.string(ha);
    const auto rest = std::span(b).subspan(rb.offset());
    for (auto byte : rest) w.u8(byte);
    CHECK_THROWS_WITH_AS(decode_checkpoint(w.bytes()), doctest::Contains("shape"), ParseError);
  }
}

TEST_CASE("config JSON round trip and strictness") {
  RunConfig c;
  CHECK(run_config_from_json(to_json(c)) == c);
  c.train.max_steps = 17;
  c.model.widths = {8, 16, 32};
  c.train.adam.learning_rate = 1e-3f;
  CHECK(run_config_from_json(to_json(c)) == c);
  CHECK(to_json(RunConfig{}).dump().find("0.0003") != std::string::npos);

  Json j = to_json(RunConfig{});
  j["train"]["bogus"] = 1;
  CHECK_THROWS_WITH_AS(run_config_from_json(j), doctest::Contains("config.train.bogus"),
                       std::invalid_argument);
  CHECK(run_config_from_json(Json::object()) == RunConfig{});
  CHECK(run_config_from_json(Json{{"train", {{"max_steps", 5}}}}).train.max_steps == 5);
  CHECK_THROWS_AS(run_config_from_json(Json{{"train", {{"max_steps", "many"}}}}),
                  std::invalid_argument);
}

TEST_CASE("config overrides") {
  Json j = to_json(RunConfig{});
  apply_override(j, "max-steps", "0");
  apply_override(j, "model.image_size", "16");
  apply_override(j, "run_dir", "out/x");
  apply_override(j, "train.adam.learning_rate", "0.001");
  const RunConfig c = run_config_from_json(j);
  CHECK(c.train.max_steps == 0);
  CHECK(c.model.image_size == 16);
  CHECK(c.run_dir == "out/x");
  CHECK(c.train.adam.learning_rate == 0.001f);
  CHECK_THROWS_WITH_AS(apply_override(j, "seed", "3"), doctest::Contains("ambiguous"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(apply_override(j, "nope", "3"), doctest::Contains("unknown"),
                       std::invalid_argument);
}

}  // TEST_SUITE
