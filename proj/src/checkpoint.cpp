#include "fvae/checkpoint.hpp"

#include <set>
#include <sstream>

#include "fvae/binary_io.hpp"
#include "fvae/config.hpp"

namespace fvae {
namespace {

constexpr std::string_view kMagic = "FVAE";

void put_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
  w.string(name);
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (float v : t.data()) w.f32(v);
}

void put_moments(std::map<std::string, Tensor>& out, const std::string& prefix,
                 const AdamState& adam) {
  for (const auto& [name, m] : adam.moments) {
    out[prefix + ".m." + name] = m.m;
    out[prefix + ".v." + name] = m.v;
  }
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(TrainingState& state) {
  std::ostringstream rng_text;
  rng_text << state.rng;
  Json header = {
      {"model", to_json(state.model.config())},
      {"train", to_json(state.config)},
      {"step", state.step},
      {"mask_step", state.mask_step},
      {"adam_step", state.adam.step},
      {"mask_adam_step", state.mask_adam.step},
      {"rng", rng_text.str()},
      {"early_stop",
       {{"best", state.early_stop.best ? Json(*state.early_stop.best) : Json(nullptr)},
        {"bad_evals", state.early_stop.bad_evals},
        {"stopped", state.early_stop.stopped}}}};

  std::map<std::string, Tensor> tensors;
  for (const auto& [name, t] : state.model.params().tensors()) tensors[name] = *t;
  put_moments(tensors, "adam", state.adam);
  put_moments(tensors, "mask_adam", state.mask_adam);

  ByteWriter w;
  w.raw(kMagic);
  w.u32(kCheckpointVersion);
  w.string(header.dump());
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) put_tensor(w, name, t);
  return w.take();
}

TrainingState decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.raw(kMagic.size()) != kMagic) throw ParseError("checkpoint: bad magic", 0);
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                         std::to_string(kCheckpointVersion) + ")",
                     version_at);
  }
  const std::size_t header_at = r.offset();
  const Json header = Json::parse(r.string(), nullptr, false);
  if (header.is_discarded() || !header.is_object()) {
    throw ParseError("checkpoint: header is not a JSON object", header_at);
  }

  auto state = [&] {
    try {
      ModelConfig mc;
      TrainConfig tc;
      from_json(header.at("model"), mc);
      from_json(header.at("train"), tc);
      TrainingState s(mc, tc);
      s.step = header.at("step").get<std::int64_t>();
      s.mask_step = header.at("mask_step").get<std::int64_t>();
      s.adam.step = header.at("adam_step").get<std::int64_t>();
      s.mask_adam.step = header.at("mask_adam_step").get<std::int64_t>();
      std::istringstream rng_text(header.at("rng").get<std::string>());
      rng_text >> s.rng;
      if (!rng_text) throw std::invalid_argument("bad rng state");
      const Json& es = header.at("early_stop");
      if (!es.at("best").is_null()) s.early_stop.best = es.at("best").get<double>();
      s.early_stop.bad_evals = es.at("bad_evals").get<int>();
      s.early_stop.stopped = es.at("stopped").get<bool>();
      return s;
    } catch (const std::exception& e) {
      throw ParseError(std::string("checkpoint: bad header: ") + e.what(), header_at);
    }
  }();

  auto targets = state.model.params().tensors();
  std::set<std::string> loaded;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const std::string name = r.string();
    Shape shape(r.u8());
    for (auto& d : shape) d = r.u32();
    if (!loaded.insert(name).second) throw ParseError("checkpoint: duplicate tensor " + name, at);
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    if (shape.empty() || n == 0 || n > r.remaining() / 4) {
      throw ParseError("checkpoint: truncated or empty tensor " + name, at);
    }
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    Tensor t(shape, std::move(data));

    Tensor* dest = nullptr;
    if (auto it = targets.find(name); it != targets.end()) {
      dest = it->second;
    } else {
      for (auto [prefix, adam] : {std::pair{std::string("adam."), &state.adam},
                                  std::pair{std::string("mask_adam."), &state.mask_adam}}) {
        if (!name.starts_with(prefix) || name.size() < prefix.size() + 2) continue;
        const std::string kind = name.substr(prefix.size(), 2);
        const std::string param = name.substr(prefix.size() + 2);
        if (kind == "m.") dest = &adam->moments[param].m;
        if (kind == "v.") dest = &adam->moments[param].v;
      }
      if (!dest) throw ParseError("checkpoint: unknown tensor " + name, at);
    }
    if (!dest->storage().empty() && dest->shape() != t.shape()) {
      throw ParseError("checkpoint: tensor " + name + " has shape " + shape_string(t.shape()) +
                           ", model expects " + shape_string(dest->shape()),
                       at);
    }
    *dest = std::move(t);
  }
  for (const auto& [name, t] : targets) {
    if (!loaded.count(name)) throw ParseError("checkpoint: missing tensor " + name, r.offset());
  }
  for (const AdamState* adam : {&state.adam, &state.mask_adam}) {
    for (const auto& [name, m] : adam->moments) {
      if (m.m.shape() != m.v.shape()) {
        throw ParseError("checkpoint: incomplete optimizer moments for " + name, r.offset());
      }
    }
  }
  if (r.remaining() != 0) throw ParseError("checkpoint: trailing bytes", r.offset());
  return state;
}

void save_checkpoint(TrainingState& state, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(state));
}

TrainingState load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_checkpoint(bytes);
}

}  // namespace fvae
