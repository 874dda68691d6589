#include "turbo/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace turbo {

namespace {

constexpr char kMagic[8] = {'T', 'B', 'C', 'N', '0', '0', '0', '1'};
constexpr std::uint32_t kFormatVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("checkpoint: truncated while reading " + what);
  return v;
}

void write_blob(std::ostream& os, const std::string& name, const Tensor& t) {
  write_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
  for (int d : t.shape) write_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.ptr()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
}

nlohmann::json config_json(const Model& m, const CheckpointMeta& meta) {
  const ModelConfig& c = m.config();
  const ConnectionSpec& s = m.spec();
  nlohmann::json j;
  j["format_version"] = kFormatVersion;
  j["model"] = {{"n_layers", c.n_layers},   {"d_hidden", c.d_hidden},
                {"n_heads", c.n_heads},     {"d_kv", c.d_kv},
                {"d_inter", c.d_inter},     {"vocab_size", c.vocab_size},
                {"max_seq", c.max_seq}};
  nlohmann::json conns = nlohmann::json::array();
  for (const Connection& cc : s.connections) conns.push_back({cc.src, cc.dst});
  j["connections"] = conns;
  j["alpha"] = s.alpha;
  j["group_size"] = s.group_size;
  j["proj_rank"] = s.proj_rank;
  if (m.has_lora()) {
    j["lora"] = {{"rank", m.lora_config().rank}, {"targets", m.lora_config().targets}};
  }
  j["method"] = meta.method;
  j["soft_lambda"] = meta.soft_lambda;
  j["step"] = meta.step;
  j["epoch"] = meta.epoch;
  j["adam_t"] = meta.adam_t;
  j["rng"] = meta.rng_state;
  return j;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const CheckpointMeta& meta,
                     const std::map<std::string, Tensor>& opt_state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  const std::string header = config_json(model, meta).dump();
  write_u32(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));

  const auto params = model.parameters();
  write_u32(os, static_cast<std::uint32_t>(params.size() + opt_state.size()));
  for (const auto& [name, t] : params) write_blob(os, name, t);
  for (const auto& [name, t] : opt_state) write_blob(os, name, t);
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  const std::uint32_t hlen = read_u32(is, "header length");
  std::string header(hlen, '\0');
  is.read(header.data(), hlen);
  if (!is) throw IoError("checkpoint: truncated header in " + path);

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint: malformed header: " + std::string(e.what()));
  }
  if (j.value("format_version", 0u) != kFormatVersion)
    throw IoError("checkpoint: unsupported format version");

  ModelConfig cfg;
  const auto& jm = j.at("model");
  cfg.n_layers = jm.at("n_layers");
  cfg.d_hidden = jm.at("d_hidden");
  cfg.n_heads = jm.at("n_heads");
  cfg.d_kv = jm.at("d_kv");
  cfg.d_inter = jm.at("d_inter");
  cfg.vocab_size = jm.at("vocab_size");
  cfg.max_seq = jm.at("max_seq");

  ConnectionSpec spec;
  for (const auto& c : j.at("connections")) spec.connections.push_back({c.at(0), c.at(1)});
  spec.alpha = j.at("alpha");
  spec.group_size = j.at("group_size");
  spec.proj_rank = j.at("proj_rank");

  LoadedCheckpoint out;
  out.model = std::make_shared<Model>(cfg, spec, 0);
  if (j.contains("lora")) {
    out.model->attach_lora(j["lora"].at("rank"),
                           j["lora"].at("targets").get<std::vector<std::string>>());
  }
  out.meta.method = j.value("method", "baseline");
  out.meta.soft_lambda = j.value("soft_lambda", 0.0f);
  out.meta.step = j.value("step", 0);
  out.meta.epoch = j.value("epoch", 0);
  out.meta.adam_t = j.value("adam_t", static_cast<std::int64_t>(0));
  out.meta.rng_state = j.value("rng", std::string());

  std::map<std::string, Tensor> params;
  for (auto& [name, t] : out.model->parameters()) params.emplace(name, t);
  std::map<std::string, bool> seen;
  for (const auto& [name, t] : params) seen[name] = false;

  const std::uint32_t nblobs = read_u32(is, "blob count");
  for (std::uint32_t bi = 0; bi < nblobs; ++bi) {
    const std::uint32_t nlen = read_u32(is, "blob name length");
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    const std::uint32_t ndim = read_u32(is, "blob rank");
    std::vector<int> shape(ndim);
    for (std::uint32_t di = 0; di < ndim; ++di)
      shape[di] = static_cast<int>(read_u32(is, "blob dimension"));
    const std::size_t n = Tensor::numel_of(shape);
    Tensor t = Tensor::zeros(shape);
    is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!is) throw IoError("checkpoint: truncated blob '" + name + "' in " + path);

    if (name.rfind("opt.", 0) == 0) {
      out.opt_state.emplace(name, std::move(t));
      continue;
    }
    const auto it = params.find(name);
    if (it == params.end()) throw IoError("checkpoint: unexpected parameter blob '" + name + "'");
    if (it->second.shape != shape)
      throw IoError("checkpoint: parameter '" + name + "' has shape " + t.shape_str() +
                    " but the config requires " + it->second.shape_str());
    *it->second.data = *t.data;
    seen[name] = true;
  }
  for (const auto& [name, was_seen] : seen)
    if (!was_seen) throw IoError("checkpoint: missing parameter blob '" + name + "'");
  return out;
}

}  // namespace turbo
