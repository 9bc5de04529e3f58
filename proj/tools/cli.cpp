#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "mixmil/image.hpp"
#include "mixmil/instances.hpp"
#include "mixmil/model.hpp"
#include "mixmil/run_config.hpp"
#include "mixmil/superpixel.hpp"
#include "mixmil/synth.hpp"
#include "mixmil/training.hpp"
#include "mixmil/visualize.hpp"

namespace mixmil::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Usage or configuration problem detected before any work starts.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t workers = 1;
  bool strict = false;
  std::string mask_ratio;
  std::string lambda;
  std::optional<std::size_t> folds;
  std::vector<std::string> sets;
  std::vector<std::string> positional;
  std::string slides;
};

std::vector<double> parse_list(const std::string& flag, const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(flag + ": '" + item + "' is not a number");
    }
  }
  if (out.empty()) throw UsageError(flag + ": empty list");
  return out;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

RunConfig resolve_config(const Options& opt) {
  RunConfig cfg = opt.config.empty() ? RunConfig{} : load_config(opt.config);
  for (const auto& kv : opt.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (opt.seed) {
    cfg.train.seed = *opt.seed;
    cfg.synth.seed = *opt.seed;
  }
  if (opt.folds) cfg.folds = *opt.folds;
  if (!opt.mask_ratio.empty()) cfg.train.mask_ratio = parse_list("--mask-ratio", opt.mask_ratio).front();
  if (!opt.lambda.empty()) cfg.train.lambda = parse_list("--lambda", opt.lambda).front();
  cfg.validate();
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

json auc_json(const std::vector<std::optional<double>>& per_class) {
  json out = json::array();
  for (const auto& a : per_class) out.push_back(a ? json(*a) : json(nullptr));
  return out;
}

json metrics_json(const MetricsReport& r, const std::vector<std::string>& test_slides) {
  return {{"class_names", r.class_names},
          {"per_class_auc", auc_json(r.per_class_auc)},
          {"macro_auc", r.macro_auc ? json(*r.macro_auc) : json(nullptr)},
          {"train_losses", r.train_losses},
          {"val_losses", r.val_losses},
          {"best_epoch", r.best_epoch},
          {"epochs_run", r.epochs_run},
          {"fold", r.fold},
          {"seed", r.seed},
          {"config_hash", r.config_hash},
          {"instance_head", r.instance_head_trained ? "trained" : "untrained"},
          {"test_slides", test_slides}};
}

// ---- bag cache -----------------------------------------------------------

bool empty_marker(const fs::path& dir, const std::string& hash) {
  std::ifstream in(dir / "EMPTY");
  std::string stored;
  return in && std::getline(in, stored) && stored == hash;
}

std::vector<fs::path> cached_slide_dirs(const fs::path& cache) {
  if (!fs::is_directory(cache)) throw std::runtime_error("bag cache " + cache.string() + " does not exist");
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(cache))
    if (entry.is_directory() && fs::exists(entry.path() / "COMPLETE")) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

/// Loads every complete bag; `hash` (when non-empty) must match each cache entry.
std::vector<Bag> load_cache(const fs::path& cache, const ClassSet& classes, const std::string& hash) {
  std::vector<Bag> bags;
  for (const auto& dir : cached_slide_dirs(cache)) {
    if (!hash.empty() && !bag_cache_complete(dir, hash)) {
      throw std::runtime_error("bag cache entry " + dir.string() +
                               " was prepared with different segmentation/instance settings; rerun prepare");
    }
    ClassSet stored;
    bags.push_back(load_bag(dir, &stored));
    if (!(stored == classes)) {
      throw UsageError("class set mismatch: cache " + dir.filename().string() + " has " +
                       std::to_string(stored.size()) + " classes, expected " + std::to_string(classes.size()));
    }
  }
  if (bags.empty()) throw std::runtime_error("no prepared bags under " + cache.string());
  return bags;
}

void check_bags_against(const std::vector<Bag>& bags, const ModelConfig& model) {
  for (const auto& b : bags) {
    if (b.feature_dim() != model.d) {
      throw UsageError("bag " + b.slide_id + " has feature dimension " + std::to_string(b.feature_dim()) +
                       ", model expects " + std::to_string(model.d));
    }
    if (!b.slide_label.empty() && b.slide_label.size() != model.slide_labels) {
      throw UsageError("label count mismatch: bag " + b.slide_id + " has " + std::to_string(b.slide_label.size()) +
                       " slide labels, model expects " + std::to_string(model.slide_labels));
    }
  }
}

// ---- commands ------------------------------------------------------------

int cmd_synth(const Options& opt, std::ostream& out) {
  RunConfig cfg = resolve_config(opt);
  const fs::path dir = !opt.out.empty() ? opt.out : cfg.data_dir;
  if (dir.empty()) throw UsageError("synth needs --out (or paths.data)");
  cfg.data_dir = dir.string();
  BagBuildOptions build;
  build.build = false;
  const auto data = generate_dataset(cfg.synth, build);
  write_dataset(dir, data);
  write_resolved(dir / "config.resolved", cfg);
  std::vector<double> marginal(cfg.classes.size(), 0.0);
  std::set<std::string> patients;
  for (const auto& s : data.slides) {
    patients.insert(s.patient_id);
    for (std::size_t c = 0; c < marginal.size(); ++c) marginal[c] += s.slide_label[c];
  }
  out << "synth: " << data.slides.size() << " slides, " << patients.size() << " patients -> " << dir.string() << '\n';
  out << "slide-label frequency:";
  for (std::size_t c = 0; c < marginal.size(); ++c) {
    out << ' ' << cfg.classes.name(c) << '=' << std::fixed << std::setprecision(2)
        << marginal[c] / static_cast<double>(data.slides.size());
  }
  out << std::defaultfloat << "\nlabel noise: " << cfg.synth.label_noise << ", config hash: " << config_hash(cfg) << '\n';
  return kExitOk;
}

int cmd_prepare(const Options& opt, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve_config(opt);
  const fs::path data_dir = !opt.positional.empty() ? opt.positional[0] : cfg.data_dir;
  const fs::path cache = !opt.out.empty() ? opt.out : cfg.cache_dir;
  if (data_dir.empty()) throw UsageError("prepare needs a data directory");
  if (cache.empty()) throw UsageError("prepare needs --out (or paths.cache)");
  cfg.data_dir = data_dir.string();
  cfg.cache_dir = cache.string();
  const json manifest = read_json(data_dir / "manifest.json");
  const json& slides = manifest.at("slides");
  const std::string hash = cache_hash(cfg);
  fs::create_directories(cache);
  write_resolved(cache / "config.resolved", cfg);

  std::mutex log_mutex;
  std::atomic<std::size_t> computed{0}, cached{0}, empty{0}, errors{0}, next{0}, done{0};
  const std::size_t n = slides.size();
  auto log = [&](std::ostream& s, const std::string& line) {
    std::lock_guard lock(log_mutex);
    s << line << '\n';
  };
  auto process = [&](const json& s) {
    const std::string id = s.at("id").get<std::string>();
    const fs::path dir = cache / id;
    auto progress = [&] { return "[" + std::to_string(++done) + "/" + std::to_string(n) + "] " + id + ": "; };
    if (bag_cache_complete(dir, hash) || empty_marker(dir, hash)) {
      ++cached;
      log(out, progress() + "cached");
      return;
    }
    try {
      const fs::path image_path = data_dir / s.at("image").get<std::string>();
      const ImageRGB image = read_png_rgb(image_path);
      std::optional<LabelImage> labels;
      json source{{"image", fs::absolute(image_path).string()}};
      if (s.contains("labels") && !s["labels"].is_null()) {
        const fs::path label_path = data_dir / s["labels"].get<std::string>();
        labels = read_png_gray(label_path);
        source["labels"] = fs::absolute(label_path).string();
      }
      if (s.contains("truth") && !s["truth"].is_null()) source["truth"] = fs::absolute(data_dir / s["truth"].get<std::string>()).string();
      std::vector<int> slide_label;
      if (s.contains("slide_label") && !s["slide_label"].is_null()) {
        slide_label = s["slide_label"].get<std::vector<int>>();
      } else if (labels) {
        slide_label.assign(cfg.classes.size(), 0);
        for (auto v : labels->values)
          if (v < cfg.classes.size()) slide_label[v] = 1;
      }
      SlicParams sp = cfg.slic;
      if (sp.regions == 0) sp.regions = auto_region_count(image, cfg.instances.patch_size);
      const SuperpixelMap map = slic(image, sp);
      fs::create_directories(dir);
      fs::remove(dir / "COMPLETE");
      fs::remove(dir / "EMPTY");
      save_label_map(dir / "segmentation", map, sp.compactness);
      write_json(dir / "source.json", source);
      try {
        Bag bag = build_bag(image, map, labels ? &*labels : nullptr, slide_label, cfg.instances, cfg.classes);
        bag.slide_id = id;
        bag.patient_id = s.value("patient", id);
        save_bag(dir, bag, cfg.classes, hash);
        ++computed;
        log(out, progress() + std::to_string(bag.size()) + " instances" + (bag.instance_labels ? "" : " (no pixel labels)"));
      } catch (const EmptyBagError& e) {
        std::ofstream(dir / "EMPTY") << hash << '\n';
        ++empty;
        log(err, "warning: " + progress() + "empty bag skipped (" + e.what() + ")");
      }
    } catch (const std::exception& e) {
      ++errors;
      log(err, "error: " + progress() + e.what());
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(opt.workers, std::max<std::size_t>(n, 1)));
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) process(slides[i]);
    });
  }
  for (auto& t : pool) t.join();
  write_json(cache / "prepare.json", {{"slides", n},
                                      {"computed", computed.load()},
                                      {"cached", cached.load()},
                                      {"empty", empty.load()},
                                      {"errors", errors.load()},
                                      {"cache_hash", hash}});
  out << "prepare: " << computed << " computed, " << cached << " cached, " << empty << " empty-bag warnings, " << errors
      << " errors -> " << cache.string() << '\n';
  return errors > 0 && opt.strict ? kExitRuntime : kExitOk;
}

std::string setting_name(double lambda, double mask, bool several_lambdas) {
  if (lambda >= 1.0) return "only slide label";
  std::string name = "masking " + fmt(mask * 100.0) + "%";
  if (several_lambdas) name += " (lambda " + fmt(lambda) + ")";
  return name;
}

int cmd_train(const Options& opt, std::ostream& out) {
  RunConfig cfg = resolve_config(opt);
  const std::vector<double> masks =
      opt.mask_ratio.empty() ? std::vector<double>{cfg.train.mask_ratio} : parse_list("--mask-ratio", opt.mask_ratio);
  const std::vector<double> lambdas =
      opt.lambda.empty() ? std::vector<double>{cfg.train.lambda} : parse_list("--lambda", opt.lambda);
  for (double m : masks)
    if (!(m >= 0.0 && m < 1.0)) throw UsageError("--mask-ratio values must be in [0, 1)");
  for (double l : lambdas)
    if (!(l >= 0.0 && l <= 1.0)) throw UsageError("--lambda values must be in [0, 1]");
  const fs::path cache = !opt.positional.empty() ? opt.positional[0] : cfg.cache_dir;
  const fs::path root = !opt.out.empty() ? opt.out : cfg.out_dir;
  if (cache.empty()) throw UsageError("train needs a bag cache directory");
  if (root.empty()) throw UsageError("train needs --out (or paths.out)");
  cfg.cache_dir = cache.string();
  cfg.out_dir = root.string();

  std::vector<Bag> all = load_cache(cache, cfg.classes, cache_hash(cfg));
  check_bags_against(all, cfg.model);
  std::vector<Bag> bags;
  for (auto& b : all)
    if (!b.slide_label.empty()) bags.push_back(std::move(b));
  std::set<std::string> patients;
  for (const auto& b : bags) patients.insert(b.patient_id);
  if (patients.size() < cfg.folds) {
    throw UsageError(std::to_string(patients.size()) + " labelled patients cannot fill " + std::to_string(cfg.folds) +
                     " folds");
  }
  write_resolved(root / "config.resolved", cfg);

  const bool several = masks.size() * lambdas.size() > 1;
  json settings = json::array();
  std::ostringstream csv;
  csv << "setting,lambda,mask_ratio,macro_auc_mean,macro_auc_std,macro_auc\n";
  for (double lambda : lambdas) {
    for (double mask : masks) {
      RunConfig scfg = cfg;
      scfg.train.lambda = lambda;
      scfg.train.mask_ratio = mask;
      const fs::path dir = several ? root / ("lambda_" + fmt(lambda) + "_mask_" + fmt(mask)) : root;
      write_resolved(dir / "config.resolved", scfg);
      const std::string hash = config_hash(scfg);
      std::vector<std::size_t> folds;
      if (scfg.split == SplitMode::kfold) {
        for (std::size_t f = 0; f < scfg.folds; ++f) folds.push_back(f);
      } else {
        folds.push_back(scfg.split_fold);
      }
      std::vector<double> aucs;
      json fold_rows = json::array();
      for (std::size_t fold : folds) {
        const Split split = make_split(bags, scfg.folds, fold, scfg.train.seed);
        TrainConfig tc = scfg.train;
        tc.seed = scfg.train.seed + fold;
        TrainResult result = train(bags, split, scfg.model, tc);
        const AucReport auc = evaluate(bags, split.test, result.best, scfg.model);
        MetricsReport& report = result.report;
        report.class_names = scfg.classes.names();
        report.per_class_auc = auc.per_class;
        report.macro_auc = auc.macro;
        report.fold = static_cast<int>(fold);
        report.config_hash = hash;
        std::vector<std::string> test_slides;
        for (std::size_t b : split.test) test_slides.push_back(bags[b].slide_id);
        const fs::path ckpt = dir / "checkpoints" / ("fold_" + std::to_string(fold));
        save_checkpoint(ckpt, result.best, scfg.model, scfg.classes, report.best_epoch + 1);
        write_json(dir / ("fold_" + std::to_string(fold)) / "metrics.json", metrics_json(report, test_slides));
        aucs.push_back(auc.macro);
        fold_rows.push_back({{"fold", fold},
                             {"macro_auc", auc.macro},
                             {"per_class_auc", auc_json(auc.per_class)},
                             {"epochs_run", report.epochs_run},
                             {"best_epoch", report.best_epoch},
                             {"checkpoint", ckpt.string()}});
        out << "[" << setting_name(lambda, mask, lambdas.size() > 1) << "] fold " << fold << ": macro AUC "
            << std::setprecision(4) << auc.macro << " (" << report.epochs_run << " epochs)" << std::defaultfloat << '\n';
      }
      double mean = 0.0, var = 0.0;
      for (double a : aucs) mean += a / static_cast<double>(aucs.size());
      for (double a : aucs) var += (a - mean) * (a - mean) / static_cast<double>(aucs.size());
      const double sd = std::sqrt(var);
      const json summary{{"setting", setting_name(lambda, mask, lambdas.size() > 1)},
                         {"lambda", lambda},
                         {"mask_ratio", mask},
                         {"macro_auc_mean", mean},
                         {"macro_auc_std", sd},
                         {"folds", fold_rows},
                         {"instance_head", lambda >= 1.0 ? "untrained" : "trained"},
                         {"seed", scfg.train.seed},
                         {"config_hash", hash}};
      write_json(dir / "summary.json", summary);
      settings.push_back(summary);
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(4) << mean << "\xC2\xB1" << sd;
      csv << '"' << setting_name(lambda, mask, lambdas.size() > 1) << "\"," << lambda << ',' << mask << ','
          << std::setprecision(17) << mean << ',' << sd << ',' << cell.str() << '\n';
      out << "summary [" << setting_name(lambda, mask, lambdas.size() > 1) << "]: macro AUC " << cell.str()
          << (lambda >= 1.0 ? " (instance head untrained)" : "") << '\n';
    }
  }
  write_json(root / "metrics.json", {{"settings", settings}, {"config_hash", config_hash(cfg)}});
  std::ofstream(root / "table2.csv") << csv.str();
  return kExitOk;
}

std::vector<std::string> read_slide_list(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read slide list " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    return json::parse(text).at("test_slides").get<std::vector<std::string>>();
  }
  std::vector<std::string> ids;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    line.erase(std::remove_if(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); }), line.end());
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

void check_checkpoint(const Checkpoint& ck, const RunConfig* cfg) {
  if (cfg && !(ck.classes == cfg->classes)) throw UsageError("class set mismatch between config and checkpoint");
}

int cmd_eval(const Options& opt, std::ostream& out) {
  if (opt.positional.size() < 2) throw UsageError("eval needs <checkpoint> <bag cache>");
  const Checkpoint ck = load_checkpoint(opt.positional[0]);
  if (!opt.config.empty()) {
    const RunConfig cfg = resolve_config(opt);
    check_checkpoint(ck, &cfg);
  }
  std::vector<Bag> bags = load_cache(opt.positional[1], ck.classes, "");
  check_bags_against(bags, ck.config);
  std::vector<std::size_t> subset;
  if (!opt.slides.empty()) {
    for (const auto& id : read_slide_list(opt.slides)) {
      const auto it = std::find_if(bags.begin(), bags.end(), [&](const Bag& b) { return b.slide_id == id; });
      if (it == bags.end()) throw std::runtime_error("slide " + id + " is not in the bag cache");
      subset.push_back(static_cast<std::size_t>(it - bags.begin()));
    }
  } else {
    for (std::size_t i = 0; i < bags.size(); ++i)
      if (!bags[i].slide_label.empty()) subset.push_back(i);
  }
  for (std::size_t i : subset)
    if (bags[i].slide_label.empty()) throw std::runtime_error("slide " + bags[i].slide_id + " has no slide label");
  const AucReport auc = evaluate(bags, subset, ck.weights, ck.config);
  out << std::setprecision(17) << "macro AUC: " << auc.macro << " over " << subset.size() << " slides\n";
  for (std::size_t c = 0; c < auc.per_class.size(); ++c) {
    out << "  " << ck.classes.name(c) << ": ";
    if (auc.per_class[c]) out << *auc.per_class[c] << '\n';
    else out << "undefined (single label value)\n";
  }
  if (!opt.out.empty()) {
    std::vector<std::string> ids;
    for (std::size_t i : subset) ids.push_back(bags[i].slide_id);
    write_json(fs::path(opt.out) / "metrics.json", {{"class_names", ck.classes.names()},
                                                   {"per_class_auc", auc_json(auc.per_class)},
                                                   {"macro_auc", auc.macro},
                                                   {"slides", ids}});
  }
  return kExitOk;
}

int cmd_predict(const Options& opt, std::ostream& out) {
  if (opt.positional.size() < 2) throw UsageError("predict needs <checkpoint> <bag cache or slide cache dir>");
  const Checkpoint ck = load_checkpoint(opt.positional[0]);
  if (!opt.config.empty()) {
    const RunConfig cfg = resolve_config(opt);
    check_checkpoint(ck, &cfg);
  }
  const fs::path target = opt.positional[1];
  std::vector<Bag> bags;
  if (fs::exists(target / "COMPLETE")) {
    ClassSet stored;
    bags.push_back(load_bag(target, &stored));
    if (!(stored == ck.classes)) throw UsageError("class set mismatch between bag and checkpoint");
  } else {
    bags = load_cache(target, ck.classes, "");
  }
  check_bags_against(bags, ck.config);
  json predictions = json::array();
  for (const auto& bag : bags) {
    const SlidePrediction p = predict(bag, ck.weights, ck.config);
    json slide_probs;
    for (std::size_t c = 0; c < ck.classes.size(); ++c) slide_probs[ck.classes.name(c)] = p.slide_probabilities[c];
    json instances = json::array();
    for (std::size_t i = 0; i < p.instance_classes.size(); ++i) {
      instances.push_back({{"id", i},
                           {"region", bag.region_ids.empty() ? json(nullptr) : json(bag.region_ids[i])},
                           {"class", ck.classes.name(static_cast<std::size_t>(p.instance_classes[i]))},
                           {"probabilities", p.instance_probabilities[i]}});
    }
    predictions.push_back({{"slide_id", p.slide_id}, {"slide_probabilities", slide_probs}, {"instances", instances}});
    out << p.slide_id << ':';
    for (std::size_t c = 0; c < ck.classes.size(); ++c)
      out << ' ' << ck.classes.name(c) << '=' << std::fixed << std::setprecision(3) << p.slide_probabilities[c];
    out << std::defaultfloat << " (" << p.instance_classes.size() << " instances)\n";
  }
  if (!opt.out.empty()) write_json(fs::path(opt.out) / "predictions.json", {{"predictions", predictions}});
  return kExitOk;
}

int cmd_visualize(const Options& opt, std::ostream& out) {
  if (opt.positional.size() < 2) throw UsageError("visualize needs <checkpoint> <slide cache dir>");
  if (opt.out.empty()) throw UsageError("visualize needs --out (a .png path or a run directory)");
  const Checkpoint ck = load_checkpoint(opt.positional[0]);
  const fs::path slide_dir = opt.positional[1];
  fs::path seg = slide_dir / "segmentation";
  if (!fs::exists(fs::path(seg.string() + ".labels")) || !fs::exists(slide_dir / "source.json")) {
    throw std::runtime_error("no segmentation for " + slide_dir.string() + "; run `mixmil prepare` on the dataset first");
  }
  ClassSet stored;
  const Bag bag = load_bag(slide_dir, &stored);
  if (!(stored == ck.classes)) throw UsageError("class set mismatch between bag and checkpoint");
  check_bags_against({bag}, ck.config);
  const json source = read_json(slide_dir / "source.json");
  const ImageRGB image = read_png_rgb(source.at("image").get<std::string>());
  const SuperpixelMap map = load_label_map(seg);
  if (map.height != image.height || map.width != image.width) throw std::runtime_error("segmentation does not match slide image");
  const SlidePrediction p = predict(bag, ck.weights, ck.config);
  const auto predicted = region_classes(map, bag.region_ids, p.instance_classes);
  const ImageRGB overlay = render_overlay(image, map, predicted, ck.classes);

  fs::path target = opt.out;
  if (target.extension() != ".png") target = target / "overlays" / (bag.slide_id + ".png");
  fs::create_directories(target.parent_path().empty() ? "." : target.parent_path());
  write_png(target, overlay);
  out << "overlay: " << target.string() << " (" << image.width << "x" << image.height << ")\n";

  const char* truth_key = source.contains("truth") ? "truth" : source.contains("labels") ? "labels" : nullptr;
  if (truth_key) {
    const LabelImage truth = read_png_gray(source.at(truth_key).get<std::string>());
    auto truth_regions = region_truth(map, truth, ck.classes.size());
    std::vector<int> shown(truth_regions.size(), -1);
    for (std::int32_t r : bag.region_ids) shown[static_cast<std::size_t>(r)] = truth_regions[static_cast<std::size_t>(r)];
    const ImageRGB truth_overlay = render_overlay(image, map, shown, ck.classes);
    fs::path compare = target;
    compare.replace_filename(target.stem().string() + "_compare.png");
    write_png(compare, side_by_side(overlay, truth_overlay));
    out << "comparison: " << compare.string() << '\n';
    out << "region agreement with " << truth_key << ": " << std::setprecision(4) << region_agreement(predicted, shown)
        << std::defaultfloat << '\n';
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mixed-supervision MIL pipeline: synth, prepare, train, eval, predict, visualize"};
  app.require_subcommand(1);
  Options opt;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "flat key = value config file");
    sub->add_option("--set", opt.sets, "override one config key (key=value); repeatable")
        ->expected(1)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    sub->add_option("--seed", opt.seed, "seed for generation and training");
  };
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_config(synth);
  synth->add_option("--out", opt.out, "dataset directory");
  synth->add_option("--workers", opt.workers, "parallel slides");

  auto* prepare = app.add_subcommand("prepare", "segment slides and cache bags");
  add_config(prepare);
  prepare->add_option("data_dir", opt.positional, "dataset directory with manifest.json")->expected(0, 1);
  prepare->add_option("--out", opt.out, "bag cache directory");
  prepare->add_option("--workers", opt.workers, "parallel slides");
  prepare->add_flag("--strict", opt.strict, "exit nonzero when any slide fails");

  auto* train_cmd = app.add_subcommand("train", "train with k-fold or single split");
  add_config(train_cmd);
  train_cmd->add_option("cache", opt.positional, "bag cache directory")->expected(0, 1);
  train_cmd->add_option("--out", opt.out, "run directory");
  train_cmd->add_option("--mask-ratio", opt.mask_ratio, "masking ratio, or a comma list to sweep");
  train_cmd->add_option("--lambda", opt.lambda, "slide-loss weight, or a comma list to sweep");
  train_cmd->add_option("--folds", opt.folds, "number of folds");
  train_cmd->add_option("--workers", opt.workers, "accepted for symmetry; training is single-threaded");

  auto* eval = app.add_subcommand("eval", "macro AUC of a checkpoint on labelled bags");
  add_config(eval);
  eval->add_option("paths", opt.positional, "<checkpoint> <bag cache>")->expected(2);
  eval->add_option("--slides", opt.slides, "slide ids to score: a fold metrics.json or one id per line");
  eval->add_option("--out", opt.out, "directory for metrics.json");

  auto* predict_cmd = app.add_subcommand("predict", "per-slide and per-instance predictions");
  add_config(predict_cmd);
  predict_cmd->add_option("paths", opt.positional, "<checkpoint> <bag cache or slide dir>")->expected(2);
  predict_cmd->add_option("--out", opt.out, "directory for predictions.json");

  auto* visualize = app.add_subcommand("visualize", "instance-class overlay for one slide");
  add_config(visualize);
  visualize->add_option("paths", opt.positional, "<checkpoint> <slide cache dir>")->expected(2);
  visualize->add_option("--out", opt.out, "output .png, or a run directory (writes overlays/<slide>.png)");

  std::vector<std::string> rev(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(rev.begin(), rev.end());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  }
  try {
    if (synth->parsed()) return cmd_synth(opt, out);
    if (prepare->parsed()) return cmd_prepare(opt, out, err);
    if (train_cmd->parsed()) return cmd_train(opt, out);
    if (eval->parsed()) return cmd_eval(opt, out);
    if (predict_cmd->parsed()) return cmd_predict(opt, out);
    if (visualize->parsed()) return cmd_visualize(opt, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const RunConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace mixmil::cli
