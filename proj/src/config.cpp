#include "fvae/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <stdexcept>

#include "fvae/binary_io.hpp"

namespace fvae {
namespace {

// Shortest decimal that reads back as the same float, so echoed configs show
// 0.0003 rather than the widened double.
double flt(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::strtod(std::string(buf, res.ptr).c_str(), nullptr);
}

// Reads fields out of one JSON object, remembering which keys were consumed.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw std::invalid_argument(path_ + ": expected a JSON object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).template get<V>();
    } catch (const Json::exception& e) {
      throw std::invalid_argument(path_ + "." + key + ": " + e.what());
    }
  }

  template <typename Fn>
  void nested(const char* key, Fn&& fn) {
    seen_.insert(key);
    if (j_.contains(key)) fn(j_.at(key), path_ + "." + key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw std::invalid_argument("unknown config key " + path_ + "." + key);
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

Json to_json(const AdamConfig& c) {
  return {{"learning_rate", flt(c.learning_rate)}, {"beta1", flt(c.beta1)}, {"beta2", flt(c.beta2)},
          {"epsilon", flt(c.epsilon)}};
}

void from_json(const Json& j, AdamConfig& c, const std::string& path) {
  ObjectReader r(j, path);
  r.get("learning_rate", c.learning_rate);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("epsilon", c.epsilon);
  r.finish();
}

Json to_json(const LossWeights& c) {
  return {{"lambda_prior", flt(c.lambda_prior)}, {"lambda_flow", flt(c.lambda_flow)}, {"alpha", flt(c.alpha)},
          {"beta", flt(c.beta)}, {"neighborhood_radius", c.neighborhood_radius}};
}

void from_json(const Json& j, LossWeights& c, const std::string& path) {
  ObjectReader r(j, path);
  r.get("lambda_prior", c.lambda_prior);
  r.get("lambda_flow", c.lambda_flow);
  r.get("alpha", c.alpha);
  r.get("beta", c.beta);
  r.get("neighborhood_radius", c.neighborhood_radius);
  r.finish();
}

Json to_json(const DataConfig& c) {
  return {{"synth", to_json(c.synth)}, {"split_seed", c.split_seed},
          {"train_fraction", c.train_fraction}};
}

void from_json(const Json& j, DataConfig& c, const std::string& path) {
  ObjectReader r(j, path);
  r.nested("synth", [&](const Json& s, const std::string& p) { from_json(s, c.synth, p); });
  r.get("split_seed", c.split_seed);
  r.get("train_fraction", c.train_fraction);
  r.finish();
}

// Dotted paths of every leaf whose final component is name.
void find_leaves(const Json& j, const std::string& prefix, const std::string& name,
                 std::vector<std::string>& out) {
  for (const auto& [key, value] : j.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) {
      find_leaves(value, path, name, out);
    } else if (key == name) {
      out.push_back(path);
    }
  }
}

}  // namespace

Json to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size},     {"channels", c.channels},
          {"widths", c.widths},             {"latent_channels", c.latent_channels},
          {"init_stddev", flt(c.init_stddev)},   {"force_identity_flow", c.force_identity_flow}};
}

void from_json(const Json& j, ModelConfig& c, const std::string& path) {
  ObjectReader r(j, path);
  r.get("image_size", c.image_size);
  r.get("channels", c.channels);
  r.get("widths", c.widths);
  r.get("latent_channels", c.latent_channels);
  r.get("init_stddev", c.init_stddev);
  r.get("force_identity_flow", c.force_identity_flow);
  r.finish();
}

Json to_json(const TrainConfig& c) {
  return {{"seed", c.seed},
          {"batch_size", c.batch_size},
          {"max_steps", c.max_steps},
          {"mask_steps", c.mask_steps},
          {"clip", flt(c.clip)},
          {"adam", to_json(c.adam)},
          {"loss", to_json(c.loss)},
          {"log_interval", c.log_interval},
          {"eval_interval", c.eval_interval},
          {"patience", c.patience},
          {"validation_fraction", c.validation_fraction},
          {"hflip", c.hflip},
          {"color_transfer", c.color_transfer},
          {"checkpoint_interval", c.checkpoint_interval}};
}

void from_json(const Json& j, TrainConfig& c, const std::string& path) {
  ObjectReader r(j, path);
  r.get("seed", c.seed);
  r.get("batch_size", c.batch_size);
  r.get("max_steps", c.max_steps);
  r.get("mask_steps", c.mask_steps);
  r.get("clip", c.clip);
  r.nested("adam", [&](const Json& s, const std::string& p) { from_json(s, c.adam, p); });
  r.nested("loss", [&](const Json& s, const std::string& p) { from_json(s, c.loss, p); });
  r.get("log_interval", c.log_interval);
  r.get("eval_interval", c.eval_interval);
  r.get("patience", c.patience);
  r.get("validation_fraction", c.validation_fraction);
  r.get("hflip", c.hflip);
  r.get("color_transfer", c.color_transfer);
  r.get("checkpoint_interval", c.checkpoint_interval);
  r.finish();
}

Json to_json(const SynthConfig& c) {
  return {{"identities", c.identities}, {"image_size", c.image_size}, {"channels", c.channels},
          {"seed", c.seed}};
}

void from_json(const Json& j, SynthConfig& c, const std::string& path) {
  ObjectReader r(j, path);
  r.get("identities", c.identities);
  r.get("image_size", c.image_size);
  r.get("channels", c.channels);
  r.get("seed", c.seed);
  r.finish();
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (data.synth.identities < 1) throw std::invalid_argument("data.synth.identities must be >= 1");
  if (data.synth.image_size != model.image_size || data.synth.channels != model.channels) {
    throw std::invalid_argument("data.synth image_size/channels must match the model");
  }
  if (!(data.train_fraction > 0.0 && data.train_fraction < 1.0)) {
    throw std::invalid_argument("data.train_fraction must be in (0, 1)");
  }
}

Json to_json(const RunConfig& c) {
  return {{"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"data", to_json(c.data)},
          {"dataset_dir", c.dataset_dir},
          {"run_dir", c.run_dir}};
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  ObjectReader r(j, "config");
  r.nested("model", [&](const Json& s, const std::string& p) { from_json(s, c.model, p); });
  r.nested("train", [&](const Json& s, const std::string& p) { from_json(s, c.train, p); });
  r.nested("data", [&](const Json& s, const std::string& p) { from_json(s, c.data, p); });
  r.get("dataset_dir", c.dataset_dir);
  r.get("run_dir", c.run_dir);
  r.finish();
  return c;
}

void apply_override(Json& doc, const std::string& raw_key, const std::string& value) {
  std::string key = raw_key;
  std::replace(key.begin(), key.end(), '-', '_');
  std::string path;
  if (key.find('.') != std::string::npos) {
    path = key;
  } else {
    std::vector<std::string> matches;
    find_leaves(doc, "", key, matches);
    if (matches.empty()) throw std::invalid_argument("unknown option --" + raw_key);
    if (matches.size() > 1) {
      std::string all;
      for (const auto& m : matches) all += (all.empty() ? "" : ", ") + m;
      throw std::invalid_argument("ambiguous option --" + raw_key + " (" + all +
                                  "); use the dotted form");
    }
    path = matches.front();
  }
  Json::json_pointer ptr("/" + [&] {
    std::string p = path;
    std::replace(p.begin(), p.end(), '.', '/');
    return p;
  }());
  if (!doc.contains(ptr)) throw std::invalid_argument("unknown option --" + raw_key);
  Json parsed = Json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  doc[ptr] = parsed;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path.string() + "'");
  Json j = Json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error("config '" + path.string() + "' is not valid JSON");
  return run_config_from_json(j);
}

void save_run_config(const std::filesystem::path& path, const RunConfig& config) {
  const std::string text = to_json(config).dump(2) + "\n";
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace fvae
