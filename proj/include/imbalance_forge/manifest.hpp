/* Copyright 2026 The imbalance-forge Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "imbalance_forge/errors.hpp"
#include "imbalance_forge/io.hpp"
#include "imbalance_forge/label_map.hpp"

namespace imbalance_forge {

using json = nlohmann::json;

enum class ClassGroup { kAnatomy, kInstrument, kMisc };

inline std::string to_string(ClassGroup g) {
  switch (g) {
    case ClassGroup::kAnatomy:
      return "anatomy";
    case ClassGroup::kInstrument:
      return "instrument";
    case ClassGroup::kMisc:
      return "misc";
  }
  return "misc";
}

inline ClassGroup parse_class_group(const std::string& s) {
  if (s == "anatomy") return ClassGroup::kAnatomy;
  if (s == "instrument") return ClassGroup::kInstrument;
  if (s == "misc") return ClassGroup::kMisc;
  throw ValidationError("unknown class group '" + s +
                        "' (expected anatomy, instrument or misc)");
}

// T1/T2/T3 are the 8/17/25-class granularity levels. kCustom covers other
// class sets, e.g. synthetic benchmarks, and has no size constraint.
enum class TaskId { kT1, kT2, kT3, kCustom };

inline std::string to_string(TaskId t) {
  switch (t) {
    case TaskId::kT1:
      return "T1";
    case TaskId::kT2:
      return "T2";
    case TaskId::kT3:
      return "T3";
    case TaskId::kCustom:
      return "custom";
  }
  return "custom";
}

inline TaskId parse_task_id(const std::string& s) {
  if (s == "T1") return TaskId::kT1;
  if (s == "T2") return TaskId::kT2;
  if (s == "T3") return TaskId::kT3;
  if (s == "custom") return TaskId::kCustom;
  throw ValidationError("unknown task '" + s + "'");
}

inline std::optional<std::size_t> expected_class_count(TaskId t) {
  switch (t) {
    case TaskId::kT1:
      return 8;
    case TaskId::kT2:
      return 17;
    case TaskId::kT3:
      return 25;
    case TaskId::kCustom:
      return std::nullopt;
  }
  return std::nullopt;
}

struct ClassSpec {
  int id = 0;
  std::string name;
  ClassGroup group = ClassGroup::kMisc;
};

struct TaskSpec {
  TaskId task = TaskId::kCustom;
  std::vector<ClassSpec> classes;
  // Indexed by this task's class id; value is the class id in the next
  // coarser task. Absent for T1 and for custom tasks.
  std::optional<std::vector<int>> remap_to_coarser;

  std::size_t num_classes() const { return classes.size(); }
  bool has_class(long id) const {
    return id >= 0 && static_cast<std::size_t>(id) < classes.size();
  }

  std::vector<int> ids_in_group(ClassGroup g) const {
    std::vector<int> ids;
    for (const auto& c : classes) {
      if (c.group == g) ids.push_back(c.id);
    }
    return ids;
  }

  /// Checks id contiguity, class counts and (when `coarser` is given) that
  /// the remap table is total and surjective onto it.
  void validate(const TaskSpec* coarser = nullptr) const {
    if (classes.empty()) throw ValidationError("task has no classes");
    if (classes.size() > kIgnoreLabel) {
      throw ValidationError("task has more than 255 classes");
    }
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i].id != static_cast<int>(i)) {
        throw ValidationError("class ids must be contiguous from 0; entry " +
                              std::to_string(i) + " has id " +
                              std::to_string(classes[i].id));
      }
    }
    if (auto expected = expected_class_count(task);
        expected && *expected != classes.size()) {
      throw ValidationError("task " + to_string(task) + " must have " +
                            std::to_string(*expected) + " classes, got " +
                            std::to_string(classes.size()));
    }
    if (remap_to_coarser) {
      if (remap_to_coarser->size() != classes.size()) {
        throw ValidationError("remap_to_coarser of task " + to_string(task) +
                              " is not total");
      }
      if (coarser) {
        std::vector<bool> hit(coarser->num_classes(), false);
        for (int target : *remap_to_coarser) {
          if (!coarser->has_class(target)) {
            throw ValidationError("remap_to_coarser of task " +
                                  to_string(task) + " maps to unknown id " +
                                  std::to_string(target));
          }
          hit[static_cast<std::size_t>(target)] = true;
        }
        if (std::find(hit.begin(), hit.end(), false) != hit.end()) {
          throw ValidationError("remap_to_coarser of task " + to_string(task) +
                                " is not surjective onto " +
                                to_string(coarser->task));
        }
      }
    }
  }
};

inline json task_to_json(const TaskSpec& t) {
  json j;
  j["task"] = to_string(t.task);
  j["classes"] = json::array();
  for (const auto& c : t.classes) {
    j["classes"].push_back(
        {{"id", c.id}, {"name", c.name}, {"group", to_string(c.group)}});
  }
  if (t.remap_to_coarser) {
    json remap = json::object();
    for (std::size_t i = 0; i < t.remap_to_coarser->size(); ++i) {
      remap[std::to_string(i)] = (*t.remap_to_coarser)[i];
    }
    j["remap_to_coarser"] = remap;
  }
  return j;
}

inline long parse_class_key(const std::string& key) {
  long value = -1;
  const auto* end = key.data() + key.size();
  auto [ptr, ec] = std::from_chars(key.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw ValidationError("class key '" + key + "' is not an integer");
  }
  return value;
}

inline TaskSpec task_from_json(const json& j) {
  try {
    TaskSpec t;
    t.task = parse_task_id(j.at("task").get<std::string>());
    for (const auto& c : j.at("classes")) {
      t.classes.push_back(ClassSpec{c.at("id").get<int>(),
                                    c.at("name").get<std::string>(),
                                    parse_class_group(c.at("group"))});
    }
    if (j.contains("remap_to_coarser")) {
      std::vector<int> remap(t.classes.size(), -1);
      for (const auto& [key, value] : j["remap_to_coarser"].items()) {
        const long id = parse_class_key(key);
        if (!t.has_class(id)) {
          throw ValidationError("remap_to_coarser key " + key +
                                " is not a class of task " + to_string(t.task));
        }
        remap[static_cast<std::size_t>(id)] = value.get<int>();
      }
      if (std::find(remap.begin(), remap.end(), -1) != remap.end()) {
        throw ValidationError("remap_to_coarser of task " + to_string(t.task) +
                              " is not total");
      }
      t.remap_to_coarser = std::move(remap);
    }
    t.validate();
    return t;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed task spec: ") + e.what());
  }
}

/// The versioned T1/T2/T3 class tables with their remap chain.
class TaskCatalog {
 public:
  std::string version;

  static TaskCatalog from_json(const json& j) {
    TaskCatalog catalog;
    catalog.version = j.value("version", std::string("unversioned"));
    if (!j.contains("tasks")) throw ValidationError("task catalog has no tasks");
    for (const auto& tj : j["tasks"]) {
      TaskSpec t = task_from_json(tj);
      if (t.task == TaskId::kCustom) {
        throw ValidationError("task catalog only holds T1, T2 and T3");
      }
      catalog.tasks_[t.task] = std::move(t);
    }
    for (TaskId id : {TaskId::kT1, TaskId::kT2, TaskId::kT3}) {
      if (!catalog.tasks_.count(id)) {
        throw ValidationError("task catalog is missing " + to_string(id));
      }
    }
    if (catalog.get(TaskId::kT1).remap_to_coarser) {
      throw ValidationError("T1 is the coarsest task and cannot be remapped");
    }
    for (TaskId id : {TaskId::kT2, TaskId::kT3}) {
      if (!catalog.get(id).remap_to_coarser) {
        throw ValidationError(to_string(id) + " lacks remap_to_coarser");
      }
    }
    catalog.get(TaskId::kT2).validate(&catalog.get(TaskId::kT1));
    catalog.get(TaskId::kT3).validate(&catalog.get(TaskId::kT2));
    return catalog;
  }

  static TaskCatalog load(const std::filesystem::path& path) {
    return from_json(io::read_json(path));
  }

  const TaskSpec& get(TaskId id) const {
    auto it = tasks_.find(id);
    if (it == tasks_.end()) {
      throw ValidationError("task catalog has no " + to_string(id));
    }
    return it->second;
  }

  /// Lookup table over all 256 byte values from `from` ids to `to` ids;
  /// kIgnoreLabel maps to itself and invalid ids map to kIgnoreLabel with
  /// valid[v] = false.
  struct RemapTable {
    std::vector<std::uint8_t> lut = std::vector<std::uint8_t>(256, kIgnoreLabel);
    std::vector<bool> valid = std::vector<bool>(256, false);
  };

  RemapTable remap_table(TaskId from, TaskId to) const {
    auto rank = [](TaskId t) { return static_cast<int>(t); };
    if (rank(to) > rank(from)) {
      throw ValidationError("cannot remap " + to_string(from) + " to finer " +
                            to_string(to));
    }
    RemapTable table;
    const TaskSpec& src = get(from);
    for (const auto& c : src.classes) {
      int id = c.id;
      for (int level = rank(from); level > rank(to); --level) {
        id = (*get(static_cast<TaskId>(level)).remap_to_coarser)
            [static_cast<std::size_t>(id)];
      }
      table.lut[static_cast<std::size_t>(c.id)] = static_cast<std::uint8_t>(id);
      table.valid[static_cast<std::size_t>(c.id)] = true;
    }
    table.valid[kIgnoreLabel] = true;
    return table;
  }

 private:
  std::map<TaskId, TaskSpec> tasks_;
};

inline LabelMap apply_remap(const LabelMap& labels,
                            const TaskCatalog::RemapTable& table,
                            const std::string& from_name) {
  LabelMap out(labels.height, labels.width);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::uint8_t v = labels.pixels[i];
    if (!table.valid[v]) {
      throw ValidationError("label value " + std::to_string(v) +
                            " is not a class of " + from_name);
    }
    out.pixels[i] = table.lut[v];
  }
  return out;
}

/// Maps labels to a coarser (or the same) granularity through the catalog's
/// remap chain. Ignore pixels are preserved.
inline LabelMap remap_labels(const LabelMap& labels, const TaskCatalog& catalog,
                             TaskId from, TaskId to) {
  return apply_remap(labels, catalog.remap_table(from, to), to_string(from));
}

/// Two-spec form: identity when the tasks match, otherwise `from` must carry
/// a remap table into `to`.
inline LabelMap remap_labels(const LabelMap& labels, const TaskSpec& from,
                             const TaskSpec& to) {
  TaskCatalog::RemapTable table;
  const bool same = from.task == to.task;
  if (!same && !from.remap_to_coarser) {
    throw ValidationError("task " + to_string(from.task) +
                          " has no remap into " + to_string(to.task));
  }
  if (!same) from.validate(&to);
  for (const auto& c : from.classes) {
    const auto id = static_cast<std::size_t>(c.id);
    table.lut[id] = static_cast<std::uint8_t>(
        same ? c.id : (*from.remap_to_coarser)[id]);
    table.valid[id] = true;
  }
  table.valid[kIgnoreLabel] = true;
  return apply_remap(labels, table, to_string(from.task));
}

/// Per-class pixel histogram, ignore pixels excluded.
inline std::vector<std::int64_t> count_labels(const LabelMap& labels,
                                              std::size_t num_classes) {
  std::vector<std::int64_t> counts(num_classes, 0);
  for (std::uint8_t v : labels.pixels) {
    if (v == kIgnoreLabel) continue;
    if (v >= num_classes) {
      throw ValidationError("label value " + std::to_string(v) +
                            " outside task with " + std::to_string(num_classes) +
                            " classes");
    }
    ++counts[v];
  }
  return counts;
}

struct RecordStats {
  std::string record_id;
  std::int64_t width = 0;
  std::int64_t height = 0;
  // Dense, indexed by class id of the active task.
  std::vector<std::int64_t> pixel_counts;
  std::optional<std::string> image_path;
  std::optional<std::string> label_path;

  std::int64_t labelled_pixels() const {
    std::int64_t total = 0;
    for (auto c : pixel_counts) total += c;
    return total;
  }
  bool contains(std::size_t class_id) const {
    return class_id < pixel_counts.size() && pixel_counts[class_id] > 0;
  }
};

inline void check_record(const RecordStats& r, const TaskSpec& task) {
  if (r.width <= 0 || r.height <= 0) {
    throw ValidationError("record '" + r.record_id +
                          "' must have positive width and height");
  }
  if (r.pixel_counts.size() != task.num_classes()) {
    throw ValidationError("record '" + r.record_id +
                          "' pixel_counts do not cover the task classes");
  }
  for (auto c : r.pixel_counts) {
    if (c < 0) {
      throw ValidationError("record '" + r.record_id +
                            "' has a negative pixel count");
    }
  }
  if (r.labelled_pixels() > r.width * r.height) {
    throw ValidationError("record '" + r.record_id + "' pixel_counts sum " +
                          std::to_string(r.labelled_pixels()) +
                          " exceeds width*height " +
                          std::to_string(r.width * r.height));
  }
}

class DatasetManifest {
 public:
  DatasetManifest() = default;
  DatasetManifest(TaskSpec task, std::vector<RecordStats> records)
      : task_(std::move(task)), records_(std::move(records)) {
    validate();
  }

  const TaskSpec& task() const { return task_; }
  const std::vector<RecordStats>& records() const { return records_; }
  const RecordStats& record(std::size_t i) const { return records_.at(i); }
  std::size_t size() const { return records_.size(); }
  std::size_t num_classes() const { return task_.num_classes(); }

  std::optional<std::size_t> index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Records for which keep(record) holds, in manifest order.
  template <typename Pred>
  DatasetManifest filter(Pred keep) const {
    std::vector<RecordStats> kept;
    for (const auto& r : records_) {
      if (keep(r)) kept.push_back(r);
    }
    return DatasetManifest(task_, std::move(kept));
  }

 private:
  void validate() {
    task_.validate();
    if (records_.empty()) throw ValidationError("manifest has no records");
    index_.clear();
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const auto& r = records_[i];
      if (!index_.emplace(r.record_id, i).second) {
        throw ValidationError("duplicate record_id '" + r.record_id + "'");
      }
      check_record(r, task_);
    }
  }

  TaskSpec task_;
  std::vector<RecordStats> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline json record_to_json(const RecordStats& r) {
  json counts = json::object();
  for (std::size_t c = 0; c < r.pixel_counts.size(); ++c) {
    if (r.pixel_counts[c] > 0) counts[std::to_string(c)] = r.pixel_counts[c];
  }
  json j = {{"id", r.record_id},
            {"width", r.width},
            {"height", r.height},
            {"pixel_counts", counts}};
  if (r.image_path) j["image_path"] = *r.image_path;
  if (r.label_path) j["label_path"] = *r.label_path;
  return j;
}

inline RecordStats record_from_json(const json& j, const TaskSpec& task) {
  RecordStats r;
  r.record_id = j.at("id").get<std::string>();
  r.width = j.at("width").get<std::int64_t>();
  r.height = j.at("height").get<std::int64_t>();
  r.pixel_counts.assign(task.num_classes(), 0);
  for (const auto& [key, value] : j.at("pixel_counts").items()) {
    const long id = parse_class_key(key);
    if (!task.has_class(id)) {
      throw ValidationError("record '" + r.record_id + "' has class id " + key +
                            " outside task " + to_string(task.task));
    }
    r.pixel_counts[static_cast<std::size_t>(id)] = value.get<std::int64_t>();
  }
  if (j.contains("image_path")) r.image_path = j["image_path"].get<std::string>();
  if (j.contains("label_path")) r.label_path = j["label_path"].get<std::string>();
  return r;
}

/// JSONL: a header line with the task spec, then one record per line.
/// Errors name the offending line number (1-based).
inline DatasetManifest parse_manifest(std::istream& in,
                                      const std::string& source = "manifest") {
  std::string line;
  std::size_t line_no = 0;
  std::optional<TaskSpec> task;
  std::vector<RecordStats> records;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(where + "malformed line: " + e.what());
    }
    try {
      if (!task) {
        task = task_from_json(j);
        continue;
      }
      RecordStats r = record_from_json(j, *task);
      check_record(r, *task);
      if (!seen.insert(r.record_id).second) {
        throw ValidationError("duplicate record_id '" + r.record_id + "'");
      }
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ValidationError(where + "malformed line: " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
  }
  if (!task) throw ValidationError(source + ": empty manifest");
  if (records.empty()) throw ValidationError(source + ": manifest has no records");
  try {
    return DatasetManifest(std::move(*task), std::move(records));
  } catch (const ValidationError& e) {
    throw ValidationError(source + ": " + e.what());
  }
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::istringstream in(io::read_text(path));
  return parse_manifest(in, path.string());
}

inline std::string manifest_to_jsonl(const DatasetManifest& m) {
  std::string out = task_to_json(m.task()).dump() + "\n";
  for (const auto& r : m.records()) out += record_to_json(r).dump() + "\n";
  return out;
}

inline void write_manifest(const std::filesystem::path& path,
                           const DatasetManifest& m) {
  io::write_text(path, manifest_to_jsonl(m));
}

/// Image-level occurrence frequency per class: records with a positive
/// count over all records. Every class of the task is present.
inline std::vector<double> class_frequencies(const DatasetManifest& m) {
  std::vector<double> freq(m.num_classes(), 0.0);
  std::vector<std::size_t> hits(m.num_classes(), 0);
  for (const auto& r : m.records()) {
    for (std::size_t c = 0; c < hits.size(); ++c) {
      if (r.pixel_counts[c] > 0) ++hits[c];
    }
  }
  for (std::size_t c = 0; c < hits.size(); ++c) {
    freq[c] = static_cast<double>(hits[c]) / static_cast<double>(m.size());
  }
  return freq;
}

/// Instrument classes occurring in fewer than `threshold` of the records.
inline std::set<int> rare_classes(const DatasetManifest& m,
                                  double threshold = 0.10) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ValidationError("rare-class threshold must lie in (0, 1)");
  }
  const auto freq = class_frequencies(m);
  std::set<int> rare;
  for (const auto& c : m.task().classes) {
    if (c.group == ClassGroup::kInstrument &&
        freq[static_cast<std::size_t>(c.id)] < threshold) {
      rare.insert(c.id);
    }
  }
  return rare;
}

}  // namespace imbalance_forge
