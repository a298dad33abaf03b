#pragma once

// Budgeted pixel-editing sessions, labeling tasks and the agreement rule,
// persisted as append-only JSON-lines logs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "invariance/attack.hpp"
#include "invariance/dataset_io.hpp"
#include "invariance/error.hpp"
#include "invariance/image.hpp"
#include "invariance/rng.hpp"

namespace invariance::annotation {

using nlohmann::json;

/// Vote value for "cannot be labeled".
inline constexpr int kUnreadable = -1;
inline constexpr double kDefaultThreshold = 0.7;
inline constexpr double kLinfSlack = 1e-9;

struct EditRecord {
  std::size_t pixel = 0;
  double old_value = 0.0;
  double new_value = 0.0;
  std::int64_t timestamp_ms = 0;
  std::uint64_t batch = 0;  ///< session version the edit produced
};

struct BudgetReport {
  std::size_t l0_used = 0;
  double linf_used = 0.0;
  double epsilon = 0.0;
  AttackNorm norm = AttackNorm::L0;

  double remaining() const {
    return norm == AttackNorm::L0 ? epsilon - static_cast<double>(l0_used) : std::max(0.0, epsilon - linf_used);
  }
};

inline BudgetReport measure_budget(const GrayImage& base, const GrayImage& current, AttackNorm norm, double eps) {
  return {l0_quantized(current, base), linf_distance(current, base), eps, norm};
}

inline bool within_budget(const BudgetReport& r) {
  return r.norm == AttackNorm::L0 ? static_cast<double>(r.l0_used) <= r.epsilon : r.linf_used <= r.epsilon + kLinfSlack;
}

struct EditSession {
  std::string id;
  std::size_t base_index = 0;
  int label = 0;
  AttackNorm norm = AttackNorm::L0;
  double epsilon = 0.0;
  GrayImage base;
  GrayImage current;
  std::vector<EditRecord> edit_log;
  std::uint64_t version = 0;

  BudgetReport budget() const { return measure_budget(base, current, norm, epsilon); }

  /// Per-pixel room left under an l-infinity budget: how far each pixel may
  /// still move away from its base value.
  std::vector<double> linf_slack() const {
    std::vector<double> out(base.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = std::max(0.0, epsilon - std::abs(current.pixels[i] - base.pixels[i]));
    return out;
  }

  GrayImage replay() const {
    GrayImage img = base;
    for (const auto& e : edit_log) img.pixels[e.pixel] = e.new_value;
    return img;
  }
};

struct StoredExample {
  std::string id;
  std::string session_id;
  int claimed_label = 0;
  GalleryEntry entry;
};

struct TaskItem {
  std::string id;
  std::string ref;  ///< example id, or "clean:<index>"
  bool crafted = false;
  int original_label = 0;
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
};

struct Vote {
  std::string rater;
  std::string item;
  int label = 0;  ///< category or kUnreadable
};

struct LabelingTask {
  std::string id;
  std::vector<TaskItem> items;  ///< presentation order
  std::vector<Vote> votes;
  double threshold = kDefaultThreshold;
  std::uint64_t seed = 0;
  int num_categories = 10;

  const TaskItem* find_item(const std::string& item) const {
    for (const auto& it : items)
      if (it.id == item) return &it;
    return nullptr;
  }
  bool has_vote(const std::string& rater, const std::string& item) const {
    return std::any_of(votes.begin(), votes.end(), [&](const Vote& v) { return v.rater == rater && v.item == item; });
  }
};

enum class Verdict { Successful, OriginalConsensus, NoConsensus, UnreadableConsensus };

inline std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::Successful: return "successful";
    case Verdict::OriginalConsensus: return "original_consensus";
    case Verdict::NoConsensus: return "no_consensus";
    case Verdict::UnreadableConsensus: return "unreadable_consensus";
  }
  return "?";
}

struct ItemVotes {
  std::string item;
  int original_label = 0;
  bool crafted = true;
  std::vector<int> labels;
};

struct ItemVerdict {
  std::string item;
  int original_label = 0;
  bool crafted = true;
  std::size_t votes = 0;
  int top_label = 0;
  std::size_t top_count = 0;
  double agreement = 0.0;
  Verdict verdict = Verdict::NoConsensus;
};

struct SuccessReport {
  std::vector<ItemVerdict> items;
  double threshold = kDefaultThreshold;
  std::size_t successful = 0;
  std::size_t original_consensus = 0;
  std::size_t no_consensus = 0;
  std::size_t unreadable_consensus = 0;
  /// Successful fraction among crafted items (0 when there are none).
  double success_rate = 0.0;
  std::size_t crafted = 0;
};

/// An item succeeds when at least `threshold` of its votes name one label
/// and that label differs from the original. Ties for the most common label
/// go to the smallest value. Pure in the votes: order does not matter.
inline SuccessReport compute_success(const std::vector<ItemVotes>& items, double threshold = kDefaultThreshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) fail(ErrorCode::InvalidParams, "threshold must lie in (0,1]");
  SuccessReport rep;
  rep.threshold = threshold;
  for (const auto& it : items) {
    if (it.labels.empty()) fail(ErrorCode::NoVotes, "item " + it.item + " has no votes");
    std::map<int, std::size_t> counts;
    for (int l : it.labels) ++counts[l];
    ItemVerdict v;
    v.item = it.item;
    v.original_label = it.original_label;
    v.crafted = it.crafted;
    v.votes = it.labels.size();
    for (const auto& [label, c] : counts)
      if (c > v.top_count) {
        v.top_count = c;
        v.top_label = label;
      }
    v.agreement = static_cast<double>(v.top_count) / static_cast<double>(v.votes);
    if (v.agreement < threshold - 1e-12)
      v.verdict = Verdict::NoConsensus;
    else if (v.top_label == kUnreadable)
      v.verdict = Verdict::UnreadableConsensus;
    else if (v.top_label == it.original_label)
      v.verdict = Verdict::OriginalConsensus;
    else
      v.verdict = Verdict::Successful;
    switch (v.verdict) {
      case Verdict::Successful: rep.successful += it.crafted; break;
      case Verdict::OriginalConsensus: rep.original_consensus += it.crafted; break;
      case Verdict::NoConsensus: rep.no_consensus += it.crafted; break;
      case Verdict::UnreadableConsensus: rep.unreadable_consensus += it.crafted; break;
    }
    rep.crafted += it.crafted;
    rep.items.push_back(v);
  }
  if (rep.crafted > 0) rep.success_rate = static_cast<double>(rep.successful) / static_cast<double>(rep.crafted);
  return rep;
}

inline SuccessReport compute_success(const LabelingTask& task) {
  std::vector<ItemVotes> items;
  for (const auto& it : task.items) {
    ItemVotes iv{it.id, it.original_label, it.crafted, {}};
    for (const auto& v : task.votes)
      if (v.item == it.id) iv.labels.push_back(v.label);
    items.push_back(std::move(iv));
  }
  return compute_success(items, task.threshold);
}

// JSON views ---------------------------------------------------------------

inline json image_json(const GrayImage& img) {
  return {{"width", img.width}, {"height", img.height}, {"pixels", img.to_bytes()}};
}

inline json to_json(const BudgetReport& b) {
  return {{"norm", to_string(b.norm)}, {"epsilon", b.epsilon}, {"l0_used", b.l0_used},
          {"linf_used", b.linf_used},  {"remaining", b.remaining()}};
}

inline json to_json(const EditSession& s) {
  json log = json::array();
  for (const auto& e : s.edit_log)
    log.push_back({{"pixel", e.pixel}, {"old", e.old_value}, {"new", e.new_value}, {"timestamp_ms", e.timestamp_ms},
                   {"batch", e.batch}});
  json j = {{"id", s.id},
            {"base_index", s.base_index},
            {"label", s.label},
            {"norm", to_string(s.norm)},
            {"epsilon", s.epsilon},
            {"version", s.version},
            {"base", image_json(s.base)},
            {"current", image_json(s.current)},
            {"budget", to_json(s.budget())},
            {"edit_log", log}};
  if (s.norm == AttackNorm::Linf) j["linf_slack"] = s.linf_slack();
  return j;
}

inline json vote_label_json(int label) { return label == kUnreadable ? json("unreadable") : json(label); }

inline json to_json(const SuccessReport& r) {
  json items = json::array();
  for (const auto& v : r.items)
    items.push_back({{"item", v.item},
                     {"original_label", v.original_label},
                     {"crafted", v.crafted},
                     {"votes", v.votes},
                     {"top_label", vote_label_json(v.top_label)},
                     {"top_count", v.top_count},
                     {"agreement", v.agreement},
                     {"verdict", to_string(v.verdict)}});
  return {{"threshold", r.threshold},
          {"items", items},
          {"crafted", r.crafted},
          {"successful", r.successful},
          {"original_consensus", r.original_consensus},
          {"no_consensus", r.no_consensus},
          {"unreadable_consensus", r.unreadable_consensus},
          {"success_rate", r.success_rate}};
}

/// Parses a vote label: an integer category or the string "unreadable".
inline int parse_vote_label(const json& j, int num_categories) {
  if (j.is_string() && j.get<std::string>() == "unreadable") return kUnreadable;
  if (!j.is_number_integer()) fail(ErrorCode::InvalidParams, "label must be an integer or \"unreadable\"");
  const int l = j.get<int>();
  if (l < 0 || l >= num_categories) fail(ErrorCode::InvalidParams, "label outside category range");
  return l;
}

/// Sessions, saved examples and labeling tasks over one image dataset.
///
/// Every mutation is appended to a JSON-lines log under the data directory
/// before it becomes visible; constructing a store replays those logs.
/// Mutations take an exclusive lock, reads a shared one.
class AnnotationStore {
 public:
  AnnotationStore(Dataset images, std::filesystem::path data_dir, std::vector<GalleryEntry> automated = {})
      : images_(std::move(images)), dir_(std::move(data_dir)), automated_(std::move(automated)) {
    std::filesystem::create_directories(dir_);
    replay();
  }

  const Dataset& images() const { return images_; }

  EditSession create_session(std::size_t base_index, AttackNorm norm, double epsilon) {
    std::unique_lock lock(mu_);
    const json ev = {{"type", "create"}, {"id", next_id("s", sessions_.size())}, {"base_index", base_index},
                     {"norm", to_string(norm)}, {"epsilon", epsilon}};
    apply_session_event(ev);
    append("sessions.jsonl", ev);
    return sessions_.at(ev["id"].get<std::string>());
  }

  EditSession get_session(const std::string& id) const {
    std::shared_lock lock(mu_);
    return session_ref(id);
  }

  /// All-or-nothing edit batch. Intensities are snapped to the byte grid.
  /// `expected_version`, when set, must equal the session's version.
  std::pair<EditSession, BudgetReport> apply_edit(const std::string& id,
                                                  const std::vector<std::pair<std::size_t, double>>& edits,
                                                  std::optional<std::uint64_t> expected_version = std::nullopt) {
    std::unique_lock lock(mu_);
    const auto& s = session_ref(id);
    if (expected_version && *expected_version != s.version)
      fail(ErrorCode::StaleSession, "session " + id + " is at version " + std::to_string(s.version));
    json list = json::array();
    for (const auto& [pixel, value] : edits) list.push_back({pixel, value});
    const json ev = {{"type", "edit"}, {"id", id}, {"edits", list}, {"timestamp_ms", now_ms()}};
    apply_session_event(ev);
    append("sessions.jsonl", ev);
    const auto& after = sessions_.at(id);
    return {after, after.budget()};
  }

  StoredExample save_example(const std::string& session_id, int claimed_label,
                             std::optional<std::uint64_t> expected_version = std::nullopt) {
    std::unique_lock lock(mu_);
    const auto& s = session_ref(session_id);
    if (expected_version && *expected_version != s.version)
      fail(ErrorCode::StaleSession, "session " + session_id + " is at version " + std::to_string(s.version));
    if (claimed_label < 0 || claimed_label >= images_.num_categories())
      fail(ErrorCode::InvalidParams, "claimed label outside category range");
    if (!within_budget(s.budget())) fail(ErrorCode::BudgetExceeded, "session violates its budget");
    const json ev = {{"type", "save"},
                     {"id", next_id("e", examples_.size())},
                     {"session", session_id},
                     {"version", s.version},
                     {"claimed_label", claimed_label},
                     {"pixels", s.current.pixels}};
    apply_example_event(ev);
    append("examples.jsonl", ev);
    return examples_.back();
  }

  std::optional<StoredExample> find_example(const std::string& id) const {
    std::shared_lock lock(mu_);
    for (const auto& e : examples_)
      if (e.id == id) return e;
    return std::nullopt;
  }

  /// Saved manual examples followed by the preloaded automated gallery.
  std::vector<StoredExample> gallery() const {
    std::shared_lock lock(mu_);
    auto out = examples_;
    for (std::size_t i = 0; i < automated_.size(); ++i)
      out.push_back({automated_id(i), "", automated_[i].donor_label.value_or(-1), automated_[i]});
    return out;
  }

  /// Items are crafted example ids (manual or automated) plus clean dataset
  /// indices, shuffled together by seed.
  LabelingTask create_task(const std::vector<std::string>& example_ids, const std::vector<std::size_t>& clean,
                           std::uint64_t seed, double threshold = kDefaultThreshold) {
    std::unique_lock lock(mu_);
    const json ev = {{"type", "create"}, {"id", next_id("t", tasks_.size())}, {"examples", example_ids},
                     {"clean", clean},   {"seed", seed},                      {"threshold", threshold}};
    apply_task_event(ev);
    append("tasks.jsonl", ev);
    return tasks_.at(ev["id"].get<std::string>());
  }

  LabelingTask get_task(const std::string& id) const {
    std::shared_lock lock(mu_);
    return task_ref(id);
  }

  /// First item in presentation order the rater has not voted on.
  std::optional<TaskItem> next_item(const std::string& task_id, const std::string& rater) const {
    std::shared_lock lock(mu_);
    const auto& t = task_ref(task_id);
    for (const auto& it : t.items)
      if (!t.has_vote(rater, it.id)) return it;
    return std::nullopt;
  }

  void submit_vote(const std::string& task_id, const std::string& rater, const std::string& item, int label) {
    std::unique_lock lock(mu_);
    const json ev = {{"type", "vote"}, {"id", task_id}, {"rater", rater}, {"item", item}, {"label", label}};
    apply_task_event(ev);
    append("tasks.jsonl", ev);
  }

  SuccessReport report(const std::string& task_id) const {
    std::shared_lock lock(mu_);
    return compute_success(task_ref(task_id));
  }

 private:
  static std::string next_id(const char* prefix, std::size_t count) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%06zu", prefix, count + 1);
    return buf;
  }
  static std::string automated_id(std::size_t i) { return next_id("a", i); }

  static std::int64_t now_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
  }

  const EditSession& session_ref(const std::string& id) const {
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) fail(ErrorCode::NotFound, "no session " + id);
    return it->second;
  }

  const LabelingTask& task_ref(const std::string& id) const {
    const auto it = tasks_.find(id);
    if (it == tasks_.end()) fail(ErrorCode::NotFound, "no task " + id);
    return it->second;
  }

  // Event application validates fully before touching state, so a throwing
  // event leaves the store unchanged and is never appended.

  void apply_session_event(const json& ev) {
    const auto type = ev.at("type").get<std::string>();
    const auto id = ev.at("id").get<std::string>();
    if (type == "create") {
      const auto base_index = ev.at("base_index").get<std::size_t>();
      if (base_index >= images_.size())
        fail(ErrorCode::UnknownImage, "no image at index " + std::to_string(base_index));
      const auto norm = parse_attack_norm(ev.at("norm").get<std::string>());
      const double eps = ev.at("epsilon").get<double>();
      if (norm == AttackNorm::L0 && !(eps >= 0.0 && eps == std::floor(eps)))
        fail(ErrorCode::InvalidParams, "l0 budget must be a non-negative integer");
      if (norm == AttackNorm::Linf && !(eps >= 0.0 && eps <= 1.0))
        fail(ErrorCode::InvalidParams, "l-infinity budget must lie in [0,1]");
      EditSession s;
      s.id = id;
      s.base_index = base_index;
      s.label = images_[base_index].label;
      s.norm = norm;
      s.epsilon = eps;
      s.base = images_[base_index].image;
      s.current = s.base;
      sessions_[id] = std::move(s);
    } else if (type == "edit") {
      const auto& s = session_ref(id);
      GrayImage next = s.current;
      std::vector<EditRecord> records;
      const auto ts = ev.value("timestamp_ms", std::int64_t{0});
      for (const auto& e : ev.at("edits")) {
        const auto pixel = e.at(0).get<std::size_t>();
        const double raw = e.at(1).get<double>();
        if (pixel >= next.pixels.size()) fail(ErrorCode::InvalidParams, "pixel index out of range");
        if (!(raw >= 0.0 && raw <= 1.0)) fail(ErrorCode::InvalidParams, "intensity must lie in [0,1]");
        const double value = dequantize(quantize(raw));
        records.push_back({pixel, next.pixels[pixel], value, ts, s.version + 1});
        next.pixels[pixel] = value;
      }
      const auto budget = measure_budget(s.base, next, s.norm, s.epsilon);
      if (!within_budget(budget))
        fail(ErrorCode::BudgetExceeded, "edit would use l0=" + std::to_string(budget.l0_used) +
                                            " linf=" + std::to_string(budget.linf_used) + " against budget " +
                                            std::to_string(s.epsilon));
      auto& m = sessions_.at(id);
      m.current = std::move(next);
      m.edit_log.insert(m.edit_log.end(), records.begin(), records.end());
      ++m.version;
    } else {
      fail(ErrorCode::MalformedHeader, "unknown session event " + type);
    }
  }

  void apply_example_event(const json& ev) {
    const auto& s = session_ref(ev.at("session").get<std::string>());
    GrayImage img(s.base.width, s.base.height, ev.at("pixels").get<std::vector<double>>());
    const auto budget = measure_budget(s.base, img, s.norm, s.epsilon);
    if (!within_budget(budget)) fail(ErrorCode::BudgetExceeded, "stored example violates its session budget");
    StoredExample ex;
    ex.id = ev.at("id").get<std::string>();
    ex.session_id = s.id;
    ex.claimed_label = ev.at("claimed_label").get<int>();
    auto& g = ex.entry;
    g.source_index = s.base_index;
    g.label = s.label;
    g.norm = to_string(s.norm);
    g.epsilon = s.epsilon;
    g.width = img.width;
    g.height = img.height;
    g.pixels = img.to_bytes();
    g.source_pixels = s.base.to_bytes();
    g.donor_label = ex.claimed_label;
    g.l0_distortion = budget.l0_used;
    g.linf_distortion = budget.linf_used;
    g.provenance = "manual";
    examples_.push_back(std::move(ex));
  }

  void apply_task_event(const json& ev) {
    const auto type = ev.at("type").get<std::string>();
    const auto id = ev.at("id").get<std::string>();
    if (type == "create") {
      const auto ids = ev.at("examples").get<std::vector<std::string>>();
      const auto clean = ev.at("clean").get<std::vector<std::size_t>>();
      if (ids.empty() && clean.empty()) fail(ErrorCode::EmptyInput, "a task needs at least one item");
      LabelingTask t;
      t.id = id;
      t.seed = ev.at("seed").get<std::uint64_t>();
      t.threshold = ev.at("threshold").get<double>();
      t.num_categories = images_.num_categories();
      if (!(t.threshold > 0.0 && t.threshold <= 1.0)) fail(ErrorCode::InvalidParams, "threshold must lie in (0,1]");
      std::vector<TaskItem> items;
      for (const auto& ref : ids) {
        const GalleryEntry* g = nullptr;
        for (const auto& e : examples_)
          if (e.id == ref) g = &e.entry;
        for (std::size_t i = 0; i < automated_.size() && !g; ++i)
          if (automated_id(i) == ref) g = &automated_[i];
        if (!g) fail(ErrorCode::NotFound, "no example " + ref);
        items.push_back({"", ref, true, g->label, g->width, g->height, g->pixels});
      }
      for (auto idx : clean) {
        if (idx >= images_.size()) fail(ErrorCode::UnknownImage, "no image at index " + std::to_string(idx));
        const auto& ex = images_[idx];
        items.push_back({"", "clean:" + std::to_string(idx), false, ex.label, ex.image.width, ex.image.height,
                         ex.image.to_bytes()});
      }
      CounterRng rng(t.seed, 0x7461736b);
      rng.shuffle(items);
      for (std::size_t i = 0; i < items.size(); ++i) items[i].id = next_id("i", i);
      t.items = std::move(items);
      tasks_[id] = std::move(t);
    } else if (type == "vote") {
      const auto& t = task_ref(id);
      const auto rater = ev.at("rater").get<std::string>();
      const auto item = ev.at("item").get<std::string>();
      const int label = ev.at("label").get<int>();
      if (rater.empty()) fail(ErrorCode::InvalidParams, "rater id must be non-empty");
      if (!t.find_item(item)) fail(ErrorCode::UnknownItem, "task " + id + " has no item " + item);
      if (label != kUnreadable && (label < 0 || label >= t.num_categories))
        fail(ErrorCode::InvalidParams, "label outside category range");
      if (t.has_vote(rater, item)) fail(ErrorCode::DuplicateVote, rater + " already voted on " + item);
      tasks_.at(id).votes.push_back({rater, item, label});
    } else {
      fail(ErrorCode::MalformedHeader, "unknown task event " + type);
    }
  }

  void append(const char* file, const json& ev) {
    std::ofstream out(dir_ / file, std::ios::app);
    if (!out) fail(ErrorCode::Io, "cannot append to " + (dir_ / file).string());
    out << ev.dump() << '\n';
    out.flush();
    if (!out) fail(ErrorCode::Io, "write to " + (dir_ / file).string() + " failed");
  }

  template <typename F>
  void replay_file(const char* file, F&& apply) {
    std::ifstream in(dir_ / file);
    if (!in) return;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      json ev;
      try {
        ev = json::parse(line);
      } catch (const json::exception& e) {
        fail(ErrorCode::MalformedHeader, std::string(file) + ":" + std::to_string(lineno) + ": " + e.what());
      }
      apply(ev);
    }
  }

  void replay() {
    replay_file("sessions.jsonl", [&](const json& ev) { apply_session_event(ev); });
    replay_file("examples.jsonl", [&](const json& ev) { apply_example_event(ev); });
    replay_file("tasks.jsonl", [&](const json& ev) { apply_task_event(ev); });
  }

  Dataset images_;
  std::filesystem::path dir_;
  std::vector<GalleryEntry> automated_;
  std::map<std::string, EditSession> sessions_;
  std::vector<StoredExample> examples_;
  std::map<std::string, LabelingTask> tasks_;
  mutable std::shared_mutex mu_;
};

}  // namespace invariance::annotation
