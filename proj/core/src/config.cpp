#include "binreplay/config.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "binreplay/io.hpp"

namespace binreplay {

using nlohmann::json;

namespace {

int line_at(const std::string& text, size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

/// Line of the last key of `path`, found by scanning for each key in turn.
int key_line(const std::string& text, const std::vector<std::string>& path) {
  size_t pos = 0;
  for (const auto& k : path) {
    const size_t at = text.find("\"" + k + "\"", pos);
    if (at == std::string::npos) break;
    pos = at + 1;
  }
  return line_at(text, pos == 0 ? 0 : pos - 1);
}

struct Reader {
  const std::string& text;
  const std::string& source;

  [[noreturn]] void fail(const std::vector<std::string>& path, const std::string& msg) const {
    std::string where;
    for (const auto& p : path) where += (where.empty() ? "" : ".") + p;
    throw ConfigError(source + ":" + std::to_string(key_line(text, path)) + ": " +
                      (where.empty() ? "" : where + ": ") + msg);
  }

  void only_keys(const json& obj, const std::vector<std::string>& path, std::initializer_list<const char*> allowed) const {
    if (!obj.is_object()) fail(path, "expected an object");
    for (const auto& [k, v] : obj.items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || k == a;
      if (!ok) {
        auto p = path;
        p.push_back(k);
        fail(p, "unknown key");
      }
    }
  }

  int64_t integer(const json& v, const std::vector<std::string>& path, int64_t lo) const {
    if (!v.is_number_integer()) fail(path, "expected an integer");
    const int64_t x = v.get<int64_t>();
    if (x < lo) fail(path, "must be >= " + std::to_string(lo));
    return x;
  }

  double real(const json& v, const std::vector<std::string>& path) const {
    if (!v.is_number()) fail(path, "expected a number");
    const double x = v.get<double>();
    if (!(x > 0.0)) fail(path, "must be > 0");
    return x;
  }

  bool boolean(const json& v, const std::vector<std::string>& path) const {
    if (!v.is_boolean()) fail(path, "expected true or false");
    return v.get<bool>();
  }

  std::string string(const json& v, const std::vector<std::string>& path) const {
    if (!v.is_string()) fail(path, "expected a string");
    return v.get<std::string>();
  }

  int bits(const json& v, const std::vector<std::string>& path) const {
    std::string s;
    if (v.is_string())
      s = v.get<std::string>();
    else if (v.is_number_integer())
      s = std::to_string(v.get<int64_t>());
    else
      fail(path, "expected a bitwidth string");
    try {
      return parse_bitwidth(s);
    } catch (const ValidationError& e) {
      fail(path, e.what());
    }
  }
};

constexpr const char* kLayerKeys[] = {"kind",   "name",    "inputs", "units", "filters",
                                      "kernel", "stride", "padding", "alpha"};

}  // namespace

RunConfig RunConfig::parse(const std::string& text, const std::string& source) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ":" + std::to_string(line_at(text, e.byte == 0 ? 0 : e.byte - 1)) +
                      ": malformed JSON (" + e.what() + ")");
  }
  Reader rd{text, source};
  RunConfig cfg;
  auto& c = cfg.continual;
  rd.only_keys(doc, {}, {"model", "bitwidths", "replay", "protocol", "dataset", "output_dir"});

  if (doc.contains("model")) {
    const auto& m = doc["model"];
    rd.only_keys(m, {"model"}, {"preset", "layers"});
    if (m.contains("preset") && m.contains("layers")) rd.fail({"model", "layers"}, "give either preset or layers");
    if (m.contains("preset")) {
      cfg.preset = rd.string(m["preset"], {"model", "preset"});
      if (cfg.preset != "reference") rd.fail({"model", "preset"}, "unknown preset \"" + cfg.preset + "\"");
    }
    if (m.contains("layers")) {
      const auto& ls = m["layers"];
      if (!ls.is_array() || ls.empty()) rd.fail({"model", "layers"}, "expected a non-empty array");
      cfg.preset.clear();
      for (const auto& l : ls) {
        const std::vector<std::string> p{"model", "layers"};
        if (!l.is_object()) rd.fail(p, "every layer must be an object");
        for (const auto& [k, v] : l.items())
          if (std::none_of(std::begin(kLayerKeys), std::end(kLayerKeys), [&](const char* a) { return k == a; }))
            rd.fail({"model", "layers", k}, "unknown key");
        LayerSpec s;
        if (!l.contains("kind")) rd.fail(p, "layer without kind");
        s.kind = rd.string(l["kind"], {"model", "layers", "kind"});
        try {
          if (parse_layer_kind(s.kind) == LayerKind::input) rd.fail({"model", "layers", "kind"}, "input is implicit");
        } catch (const ConfigError&) {
          throw;
        } catch (const ValidationError& e) {
          rd.fail({"model", "layers", "kind"}, e.what());
        }
        if (l.contains("name")) s.name = rd.string(l["name"], {"model", "layers", "name"});
        if (l.contains("inputs")) {
          if (!l["inputs"].is_array()) rd.fail({"model", "layers", "inputs"}, "expected an array of layer names");
          for (const auto& i : l["inputs"]) s.inputs.push_back(rd.string(i, {"model", "layers", "inputs"}));
        }
        if (l.contains("units")) s.units = rd.integer(l["units"], {"model", "layers", "units"}, 1);
        if (l.contains("filters")) s.filters = rd.integer(l["filters"], {"model", "layers", "filters"}, 1);
        if (l.contains("kernel")) s.kernel = rd.integer(l["kernel"], {"model", "layers", "kernel"}, 1);
        if (l.contains("stride")) s.stride = rd.integer(l["stride"], {"model", "layers", "stride"}, 1);
        if (l.contains("padding")) s.padding = rd.integer(l["padding"], {"model", "layers", "padding"}, 0);
        if (l.contains("alpha")) {
          if (!l["alpha"].is_number()) rd.fail({"model", "layers", "alpha"}, "expected a number");
          s.alpha = l["alpha"].get<double>();
        }
        cfg.layers.push_back(std::move(s));
      }
    }
  }
  if (doc.contains("bitwidths")) {
    const auto& b = doc["bitwidths"];
    rd.only_keys(b, {"bitwidths"}, {"q_f", "q_b_nonbin", "q_b_bin"});
    if (b.contains("q_f")) c.bits.q_f = rd.bits(b["q_f"], {"bitwidths", "q_f"});
    if (b.contains("q_b_nonbin")) c.bits.q_b_nonbin = rd.bits(b["q_b_nonbin"], {"bitwidths", "q_b_nonbin"});
    if (b.contains("q_b_bin")) c.bits.q_b_bin = rd.bits(b["q_b_bin"], {"bitwidths", "q_b_bin"});
    try {
      c.bits.validate();
    } catch (const ValidationError& e) {
      rd.fail({"bitwidths"}, e.what());
    }
  }
  if (doc.contains("replay")) {
    const auto& r = doc["replay"];
    rd.only_keys(r, {"replay"}, {"N", "B_N", "B_R", "level"});
    if (r.contains("N")) c.quota = rd.integer(r["N"], {"replay", "N"}, 1);
    if (r.contains("B_N")) c.batch_new = rd.integer(r["B_N"], {"replay", "B_N"}, 1);
    if (r.contains("B_R")) c.batch_replay = rd.integer(r["B_R"], {"replay", "B_R"}, 0);
    if (r.contains("level")) {
      if (r["level"].is_number_integer())
        cfg.replay_level = std::to_string(rd.integer(r["level"], {"replay", "level"}, 0));
      else
        cfg.replay_level = rd.string(r["level"], {"replay", "level"});
    }
  }
  if (doc.contains("protocol")) {
    const auto& p = doc["protocol"];
    rd.only_keys(p, {"protocol"},
                 {"num_experiences", "epochs", "lr", "seed", "pretrain_epochs", "pretrain_lr", "train_backbone",
                  "record_timing"});
    if (p.contains("num_experiences"))
      c.num_experiences = static_cast<int>(rd.integer(p["num_experiences"], {"protocol", "num_experiences"}, 1));
    if (p.contains("epochs")) c.epochs = static_cast<int>(rd.integer(p["epochs"], {"protocol", "epochs"}, 1));
    if (p.contains("lr")) c.lr = rd.real(p["lr"], {"protocol", "lr"});
    if (p.contains("seed")) {
      if (!p["seed"].is_number_unsigned()) rd.fail({"protocol", "seed"}, "expected a non-negative integer");
      c.seed = p["seed"].get<uint64_t>();
    }
    if (p.contains("pretrain_epochs"))
      c.pretrain_epochs = static_cast<int>(rd.integer(p["pretrain_epochs"], {"protocol", "pretrain_epochs"}, 1));
    if (p.contains("pretrain_lr")) c.pretrain_lr = rd.real(p["pretrain_lr"], {"protocol", "pretrain_lr"});
    if (p.contains("train_backbone")) c.train_backbone = rd.boolean(p["train_backbone"], {"protocol", "train_backbone"});
    if (p.contains("record_timing")) c.record_timing = rd.boolean(p["record_timing"], {"protocol", "record_timing"});
  }
  if (doc.contains("dataset")) cfg.dataset = rd.string(doc["dataset"], {"dataset"});
  if (doc.contains("output_dir")) cfg.output_dir = rd.string(doc["output_dir"], {"output_dir"});
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  return parse(text, path.string());
}

nlohmann::ordered_json RunConfig::to_json() const {
  using oj = nlohmann::ordered_json;
  const auto& c = continual;
  oj doc;
  oj model;
  if (layers.empty()) {
    model["preset"] = preset;
  } else {
    model["layers"] = oj::array();
    for (const auto& l : layers) {
      oj e;
      e["kind"] = l.kind;
      if (!l.name.empty()) e["name"] = l.name;
      if (!l.inputs.empty()) e["inputs"] = l.inputs;
      const LayerKind k = parse_layer_kind(l.kind);
      if (k == LayerKind::dense || k == LayerKind::binary_dense) e["units"] = l.units;
      if (k == LayerKind::conv2d || k == LayerKind::binary_conv2d) {
        e["filters"] = l.filters;
        e["kernel"] = l.kernel;
        e["stride"] = l.stride;
        e["padding"] = l.padding;
      }
      if (k == LayerKind::prelu) e["alpha"] = l.alpha;
      model["layers"].push_back(e);
    }
  }
  doc["model"] = model;
  doc["bitwidths"] = {{"q_f", bitwidth_name(c.bits.q_f)},
                      {"q_b_nonbin", bitwidth_name(c.bits.q_b_nonbin)},
                      {"q_b_bin", bitwidth_name(c.bits.q_b_bin)}};
  doc["replay"] = {{"N", c.quota}, {"B_N", c.batch_new}, {"B_R", c.batch_replay}, {"level", replay_level}};
  doc["protocol"] = {{"num_experiences", c.num_experiences},
                     {"epochs", c.epochs},
                     {"lr", c.lr},
                     {"seed", c.seed},
                     {"pretrain_epochs", c.pretrain_epochs},
                     {"pretrain_lr", c.pretrain_lr},
                     {"train_backbone", c.train_backbone},
                     {"record_timing", c.record_timing}};
  doc["dataset"] = dataset;
  doc["output_dir"] = output_dir;
  return doc;
}

std::string RunConfig::dump() const { return to_json().dump(2) + "\n"; }

Graph build_model(const RunConfig& cfg, const Shape& input, Rng& rng) {
  Graph g;
  if (cfg.layers.empty()) {
    g = build_reference_model(input, rng);
  } else {
    std::map<std::string, int> names{{"input", g.add_input(input)}};
    int prev = 0;
    for (const auto& l : cfg.layers) {
      std::vector<int> ins;
      for (const auto& n : l.inputs) {
        auto it = names.find(n);
        if (it == names.end()) throw ConfigError("layer \"" + l.name + "\" reads unknown layer \"" + n + "\"");
        ins.push_back(it->second);
      }
      if (ins.empty()) ins.push_back(prev);
      const LayerKind k = parse_layer_kind(l.kind);
      const bool two = k == LayerKind::add, many = k == LayerKind::concat;
      if ((two && ins.size() != 2) || (!two && !many && ins.size() != 1))
        throw ConfigError("layer \"" + l.name + "\" (" + l.kind + ") has the wrong number of inputs");
      const int64_t in_c = g.node(ins[0]).out_shape.dims().back();
      const BinConvSpec spec{l.kernel, l.kernel, l.stride, l.padding, in_c, l.filters};
      int id = -1;
      switch (k) {
        case LayerKind::dense: id = g.add_dense(ins[0], l.units, rng, l.name); break;
        case LayerKind::binary_dense: id = g.add_binary_dense(ins[0], l.units, rng, l.name); break;
        case LayerKind::conv2d: id = g.add_conv2d(ins[0], spec, rng, l.name); break;
        case LayerKind::binary_conv2d: id = g.add_binary_conv2d(ins[0], spec, rng, l.name); break;
        case LayerKind::batchnorm: id = g.add_batchnorm(ins[0], l.name); break;
        case LayerKind::add: id = g.add_add(ins[0], ins[1], l.name); break;
        case LayerKind::concat: id = g.add_concat(ins, l.name); break;
        case LayerKind::prelu: id = g.add_prelu(ins[0], l.alpha, l.name); break;
        case LayerKind::global_avg_pool: id = g.add_global_avg_pool(ins[0], l.name); break;
        case LayerKind::sign: id = g.add_sign(ins[0], l.name); break;
        case LayerKind::input: throw ConfigError("input is implicit");
      }
      const std::string& name = g.node(id).name;
      if (!names.emplace(name, id).second) throw ConfigError("duplicate layer name \"" + name + "\"");
      prev = id;
    }
  }
  int level = -1;
  const auto& lv = cfg.replay_level;
  if (!lv.empty() && std::all_of(lv.begin(), lv.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
    level = std::stoi(lv);
  } else {
    for (int i = 0; i < g.size(); ++i)
      if (g.node(i).name == lv) level = i;
    if (level < 0) throw ConfigError("replay level \"" + lv + "\" names no layer");
  }
  if (level < 0 || level >= g.output()) throw ConfigError("replay level must be a layer before the output");
  g.set_replay_level(level);
  return g;
}

std::string config_reference() {
  RunConfig d;
  return "Config file keys (JSON) and their defaults:\n" + d.dump() +
         "model.layers replaces the preset with a list of {kind, name, inputs, units, filters, kernel, stride,\n"
         "padding, alpha} objects; kinds: dense conv2d binary_dense binary_conv2d batchnorm add concat prelu\n"
         "global_avg_pool sign. replay.level is a layer name or index. Bitwidths: float, 32, 16, 8 (q_b_bin also\n"
         "4 and 1). dataset is a directory holding train.brds and test.brds.\n";
}

}  // namespace binreplay
