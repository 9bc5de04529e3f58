#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixmil/instances.hpp"
#include "mixmil/model.hpp"
#include "mixmil/superpixel.hpp"
#include "mixmil/synth.hpp"
#include "mixmil/training.hpp"

namespace mixmil {

/// Unknown key, malformed value or violated invariant in a run config.
class RunConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class SplitMode { kfold, single };

/// Everything a command needs, serialised as flat `key = value` lines.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SynthConfig synth;
  SlicParams slic{0, 10.0, 10, 8.0};  // regions == 0 selects auto_region_count
  InstanceConfig instances;
  ClassSet classes;
  std::size_t folds = 4;
  SplitMode split = SplitMode::kfold;
  std::size_t split_fold = 0;  // test fold for split = single
  std::string data_dir;
  std::string cache_dir;
  std::string out_dir;

  /// Sets one key from its text form. Throws RunConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  /// Every key with its current value, sorted by key.
  std::map<std::string, std::string> entries() const;
  /// Cross-field checks (model/instance widths, class counts, ranges).
  void validate() const;
};

/// All recognised keys.
std::vector<std::string> config_keys();

/// Parses `key = value` lines over the defaults; '#' starts a comment.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical text: one `key = value` line per entry, sorted.
std::string resolved_text(const RunConfig& cfg);
void write_resolved(const std::filesystem::path& path, const RunConfig& cfg);

/// SHA-1 of "blob <size>\0<text>", the way git names a blob.
std::string git_blob_hash(const std::string& text);
/// Hash of the whole resolved config.
std::string config_hash(const RunConfig& cfg);
/// Hash of the keys that shape a bag cache (slic.*, instances.*, classes).
std::string cache_hash(const RunConfig& cfg);

}  // namespace mixmil
