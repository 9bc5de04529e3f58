#include "mixmil/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include <openssl/evp.h>

namespace mixmil {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
template <class Int>
std::string fmt_int(Int v) {
  return std::to_string(v);
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || r.ec != std::errc() || r.ptr != text.data() + text.size()) {
    throw RunConfigError("config key '" + key + "': '" + text + "' is not a number");
  }
  return v;
}

template <class Int>
Int parse_int(const std::string& key, const std::string& text) {
  Int v{};
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || r.ec != std::errc() || r.ptr != text.data() + text.size()) {
    throw RunConfigError("config key '" + key + "': '" + text + "' is not a valid integer");
  }
  return v;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

std::vector<double> parse_doubles(const std::string& key, const std::string& text) {
  std::vector<double> out;
  for (const auto& item : split_list(text, ',')) out.push_back(parse_double(key, item));
  if (out.empty()) throw RunConfigError("config key '" + key + "': empty list");
  return out;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <class T>
Field real(T RunConfig::*group, double T::*member) {
  return {[=](const RunConfig& c) { return fmt(c.*group.*member); },
          [=](RunConfig& c, const std::string& k, const std::string& v) { c.*group.*member = parse_double(k, v); }};
}
template <class T, class Int>
Field integer(T RunConfig::*group, Int T::*member) {
  return {[=](const RunConfig& c) { return fmt_int(c.*group.*member); },
          [=](RunConfig& c, const std::string& k, const std::string& v) { c.*group.*member = parse_int<Int>(k, v); }};
}

// Per-class palette column as a comma list; the list length sets the palette size.
Field palette_real(double SynthClass::*member) {
  return {[=](const RunConfig& c) {
            std::vector<std::string> parts;
            for (const auto& p : c.synth.palette) parts.push_back(fmt(p.*member));
            return join(parts, ",");
          },
          [=](RunConfig& c, const std::string& k, const std::string& v) {
            const auto values = parse_doubles(k, v);
            c.synth.palette.resize(values.size());
            for (std::size_t i = 0; i < values.size(); ++i) c.synth.palette[i].*member = values[i];
          }};
}

template <class E>
Field choice(std::function<E&(RunConfig&)> ref, std::vector<std::pair<std::string, E>> options) {
  return {[=](const RunConfig& c) {
            const E value = ref(const_cast<RunConfig&>(c));
            for (const auto& [name, e] : options)
              if (e == value) return name;
            return std::string("?");
          },
          [=](RunConfig& c, const std::string& k, const std::string& v) {
            for (const auto& [name, e] : options) {
              if (name == v) {
                ref(c) = e;
                return;
              }
            }
            std::vector<std::string> names;
            for (const auto& o : options) names.push_back(o.first);
            throw RunConfigError("config key '" + k + "': '" + v + "' is not one of " + join(names, "|"));
          }};
}

Field text_field(std::string RunConfig::*member) {
  return {[=](const RunConfig& c) { return c.*member; },
          [=](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; }};
}

const std::map<std::string, Field>& registry() {
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f;
    using R = RunConfig;
    f["model.d"] = integer(&R::model, &ModelConfig::d);
    f["model.blocks"] = integer(&R::model, &ModelConfig::blocks);
    f["model.heads"] = integer(&R::model, &ModelConfig::heads);
    f["model.pe_weight"] = real(&R::model, &ModelConfig::pe_weight);
    f["model.pos_divisor"] = real(&R::model, &ModelConfig::pos_divisor);
    f["model.max_pos"] = real(&R::model, &ModelConfig::max_pos);
    f["model.head_hidden"] = integer(&R::model, &ModelConfig::head_hidden);
    f["model.dropout"] = real(&R::model, &ModelConfig::dropout);

    f["train.mask_ratio"] = real(&R::train, &TrainConfig::mask_ratio);
    f["train.lambda"] = real(&R::train, &TrainConfig::lambda);
    f["train.lr"] = real(&R::train, &TrainConfig::lr);
    f["train.weight_decay"] = real(&R::train, &TrainConfig::weight_decay);
    f["train.grad_accum"] = integer(&R::train, &TrainConfig::grad_accum);
    f["train.patience"] = integer(&R::train, &TrainConfig::patience);
    f["train.max_epochs"] = integer(&R::train, &TrainConfig::max_epochs);
    f["train.seed"] = integer(&R::train, &TrainConfig::seed);
    f["train.beta1"] = real(&R::train, &TrainConfig::beta1);
    f["train.beta2"] = real(&R::train, &TrainConfig::beta2);
    f["train.adam_eps"] = real(&R::train, &TrainConfig::adam_eps);
    f["train.lookahead_k"] = integer(&R::train, &TrainConfig::lookahead_k);
    f["train.lookahead_alpha"] = real(&R::train, &TrainConfig::lookahead_alpha);
    f["train.instance_reduction"] = choice<Reduction>([](R& c) -> Reduction& { return c.train.instance_reduction; },
                                                      {{"mean", Reduction::mean}, {"sum", Reduction::sum}});
    f["train.class_weights"] = choice<ClassWeighting>(
        [](R& c) -> ClassWeighting& { return c.train.class_weights; },
        {{"inverse_frequency", ClassWeighting::inverse_frequency}, {"none", ClassWeighting::none}});
    f["train.monitor"] = choice<ValMonitor>([](R& c) -> ValMonitor& { return c.train.monitor; },
                                            {{"total", ValMonitor::total}, {"slide", ValMonitor::slide}});
    f["train.split"] = choice<SplitMode>([](R& c) -> SplitMode& { return c.split; },
                                         {{"kfold", SplitMode::kfold}, {"single", SplitMode::single}});
    f["train.folds"] = {[](const R& c) { return fmt_int(c.folds); },
                        [](R& c, const std::string& k, const std::string& v) { c.folds = parse_int<std::size_t>(k, v); }};
    f["train.split_fold"] = {
        [](const R& c) { return fmt_int(c.split_fold); },
        [](R& c, const std::string& k, const std::string& v) { c.split_fold = parse_int<std::size_t>(k, v); }};

    f["synth.image_size"] = integer(&R::synth, &SynthConfig::image_size);
    f["synth.grid_rows"] = integer(&R::synth, &SynthConfig::grid_rows);
    f["synth.grid_cols"] = integer(&R::synth, &SynthConfig::grid_cols);
    f["synth.blank_prob"] = real(&R::synth, &SynthConfig::blank_prob);
    f["synth.label_noise"] = real(&R::synth, &SynthConfig::label_noise);
    f["synth.dominant_share"] = real(&R::synth, &SynthConfig::dominant_share);
    f["synth.slide_jitter"] = real(&R::synth, &SynthConfig::slide_jitter);
    f["synth.seed"] = integer(&R::synth, &SynthConfig::seed);
    f["synth.n_slides"] = integer(&R::synth, &SynthConfig::n_slides);
    f["synth.slides_per_patient"] = integer(&R::synth, &SynthConfig::slides_per_patient);
    f["synth.class_prior"] = {[](const R& c) {
                                std::vector<std::string> parts;
                                for (double p : c.synth.class_prior) parts.push_back(fmt(p));
                                return join(parts, ",");
                              },
                              [](R& c, const std::string& k, const std::string& v) {
                                c.synth.class_prior = parse_doubles(k, v);
                              }};
    f["synth.frequency"] = palette_real(&SynthClass::frequency);
    f["synth.orientation"] = palette_real(&SynthClass::orientation);
    f["synth.amplitude"] = palette_real(&SynthClass::amplitude);
    f["synth.sigma"] = palette_real(&SynthClass::sigma);
    f["synth.base"] = {[](const R& c) {
                         std::vector<std::string> parts;
                         for (const auto& p : c.synth.palette)
                           parts.push_back(fmt_int(+p.base[0]) + " " + fmt_int(+p.base[1]) + " " + fmt_int(+p.base[2]));
                         return join(parts, ",");
                       },
                       [](R& c, const std::string& k, const std::string& v) {
                         const auto items = split_list(v, ',');
                         c.synth.palette.resize(items.size());
                         for (std::size_t i = 0; i < items.size(); ++i) {
                           std::istringstream in(items[i]);
                           int r = -1, g = -1, b = -1;
                           std::string rest;
                           if (!(in >> r >> g >> b) || (in >> rest) || r < 0 || g < 0 || b < 0 || r > 255 || g > 255 ||
                               b > 255) {
                             throw RunConfigError("config key '" + k + "': '" + items[i] +
                                                  "' is not an 'r g b' triple in 0..255");
                           }
                           c.synth.palette[i].base = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                                                      static_cast<std::uint8_t>(b)};
                         }
                       }};

    f["slic.regions"] = integer(&R::slic, &SlicParams::regions);
    f["slic.compactness"] = real(&R::slic, &SlicParams::compactness);
    f["slic.max_iter"] = integer(&R::slic, &SlicParams::max_iter);
    f["slic.smoothing"] = real(&R::slic, &SlicParams::smoothing);

    f["instances.white_level"] = real(&R::instances, &InstanceConfig::white_level);
    f["instances.tissue_threshold"] = real(&R::instances, &InstanceConfig::tissue_threshold);
    f["instances.patch_size"] = integer(&R::instances, &InstanceConfig::patch_size);
    f["instances.feature_dim"] = integer(&R::instances, &InstanceConfig::feature_dim);

    f["classes"] = {[](const R& c) { return join(c.classes.names(), ","); },
                    [](R& c, const std::string& k, const std::string& v) {
                      try {
                        c.classes = ClassSet(split_list(v, ','));
                      } catch (const std::exception& e) {
                        throw RunConfigError("config key '" + k + "': " + e.what());
                      }
                      c.model.slide_labels = c.classes.size();
                      c.model.instance_classes = c.classes.size();
                    }};

    f["paths.data"] = text_field(&R::data_dir);
    f["paths.cache"] = text_field(&R::cache_dir);
    f["paths.out"] = text_field(&R::out_dir);
    return f;
  }();
  return fields;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& fields = registry();
  const auto it = fields.find(key);
  if (it == fields.end()) throw RunConfigError("unknown config key '" + key + "'");
  it->second.set(*this, key, value);
}

std::map<std::string, std::string> RunConfig::entries() const {
  std::map<std::string, std::string> out;
  for (const auto& [key, field] : registry()) out[key] = field.get(*this);
  return out;
}

void RunConfig::validate() const {
  auto wrap = [](const char* what, auto&& fn) {
    try {
      fn();
    } catch (const RunConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw RunConfigError(std::string(what) + ": " + e.what());
    }
  };
  wrap("model", [&] { model.validate(); });
  wrap("train", [&] { train.validate(); });
  wrap("synth", [&] { synth.validate(); });
  if (model.slide_labels != classes.size() || model.instance_classes != classes.size()) {
    throw RunConfigError("model label counts do not match the class set");
  }
  if (synth.palette.size() != classes.size()) {
    throw RunConfigError("synth palette has " + std::to_string(synth.palette.size()) + " classes, class set has " +
                         std::to_string(classes.size()));
  }
  if (model.d != instances.feature_dim) {
    throw RunConfigError("model.d (" + std::to_string(model.d) + ") must equal instances.feature_dim (" +
                         std::to_string(instances.feature_dim) + ")");
  }
  if (slic.compactness <= 0.0) throw RunConfigError("slic.compactness must be positive");
  if (slic.max_iter < 1) throw RunConfigError("slic.max_iter must be >= 1");
  if (slic.smoothing < 0.0) throw RunConfigError("slic.smoothing must be >= 0");
  if (instances.patch_size < 1) throw RunConfigError("instances.patch_size must be >= 1");
  if (instances.feature_dim < 1) throw RunConfigError("instances.feature_dim must be >= 1");
  if (!(instances.tissue_threshold >= 0.0 && instances.tissue_threshold <= 1.0)) {
    throw RunConfigError("instances.tissue_threshold must be in [0, 1]");
  }
  if (folds < 2) throw RunConfigError("train.folds must be >= 2");
  if (split_fold >= folds) throw RunConfigError("train.split_fold must be < train.folds");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [key, field] : registry()) keys.push_back(key);
  return keys;
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string content = trim(line);
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) {
      throw RunConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    cfg.set(trim(content.substr(0, eq)), trim(content.substr(eq + 1)));
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RunConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string resolved_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, value] : cfg.entries()) out += key + " = " + value + "\n";
  return out;
}

void write_resolved(const std::filesystem::path& path, const RunConfig& cfg) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << resolved_text(cfg);
}

std::string git_blob_hash(const std::string& text) {
  std::string blob = "blob " + std::to_string(text.size());
  blob.push_back('\0');
  blob += text;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string config_hash(const RunConfig& cfg) { return git_blob_hash(resolved_text(cfg)); }

std::string cache_hash(const RunConfig& cfg) {
  std::string text;
  for (const auto& [key, value] : cfg.entries()) {
    if (key.starts_with("slic.") || key.starts_with("instances.") || key == "classes") text += key + " = " + value + "\n";
  }
  return git_blob_hash(text);
}

}  // namespace mixmil
