// Ablation matrix: the named experimental arms expanded over memory sizes
// and run seeds into concrete configs, a resumable executor over run
// directories, and the aggregation that turns completed runs into per-arm
// cells and ordering verdicts.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "reframe/pipeline.hpp"

namespace reframe {

// Canonical arm order; comparisons and tables list arms this way.
inline const std::vector<std::string>& arm_names() {
  static const std::vector<std::string> names = {
      "baseline_dt", "finetuned_dt", "reframe_expert", "reframe_swap_eval",
      "reframe_dataset_amb"};
  return names;
}

inline bool is_reframe_arm(const std::string& arm) {
  return arm.rfind("reframe_", 0) == 0;
}

// The override set that turns a base config into one named arm.
inline std::vector<std::string> arm_overrides(const std::string& arm) {
  if (arm == "baseline_dt")
    return {"run.arm=baseline_dt", "policy.mode=baseline_dt"};
  if (arm == "finetuned_dt")
    return {"run.arm=finetuned_dt", "policy.mode=baseline_dt",
            "data.buffer_source=expert"};
  if (arm == "reframe_expert")
    return {"run.arm=reframe_expert", "policy.mode=reframe",
            "data.buffer_source=expert", "eval.buffer_source=train"};
  if (arm == "reframe_swap_eval")
    return {"run.arm=reframe_swap_eval", "policy.mode=reframe",
            "data.buffer_source=dataset", "eval.buffer_source=expert"};
  if (arm == "reframe_dataset_amb")
    return {"run.arm=reframe_dataset_amb", "policy.mode=reframe",
            "data.buffer_source=dataset", "eval.buffer_source=train"};
  throw ArgumentError("unknown arm '" + arm + "'");
}

struct MatrixEntry {
  std::string arm;
  std::int64_t amb_size = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
};

struct AblationMatrix {
  std::vector<MatrixEntry> entries;
};

// Size sweep applies to the memory-carrying arms only; the two baseline
// arms run once per seed at the fixed size (their buffer set is the
// fine-tuning corpus, not a swept quantity).
inline AblationMatrix build_matrix(const std::vector<std::string>& arms,
                                   const std::vector<std::int64_t>& sizes,
                                   const std::vector<std::uint64_t>& seeds,
                                   std::int64_t fixed_size = 60) {
  if (sizes.empty()) throw ArgumentError("matrix wants at least one size");
  if (seeds.empty()) throw ArgumentError("matrix wants at least one seed");
  AblationMatrix m;
  for (const std::string& arm : arms) {
    std::vector<std::int64_t> arm_sizes =
        is_reframe_arm(arm) ? sizes : std::vector<std::int64_t>{fixed_size};
    for (std::int64_t size : arm_sizes)
      for (std::uint64_t seed : seeds) {
        MatrixEntry e;
        e.arm = arm;
        e.amb_size = size;
        e.seed = seed;
        e.overrides = arm_overrides(arm);
        e.overrides.push_back("data.amb_size=" + std::to_string(size));
        e.overrides.push_back("run.seed=" + std::to_string(seed));
        m.entries.push_back(std::move(e));
      }
  }
  return m;
}

inline AblationMatrix default_matrix() {
  return build_matrix(arm_names(), {60, 45, 30}, {1, 2, 3});
}

// Applies each entry's overrides to the base config. Entries must land on
// distinct config hashes or two runs would share a directory.
inline std::vector<RunConfig> expand_matrix(const RunConfig& base,
                                            const AblationMatrix& m) {
  std::vector<RunConfig> out;
  std::set<std::uint64_t> seen;
  for (const MatrixEntry& e : m.entries) {
    RunConfig cfg = base;
    for (const std::string& ov : e.overrides) apply_override(cfg, ov);
    validate(cfg);
    if (!seen.insert(config_hash(cfg)).second)
      throw ConfigError("matrix entries collapse to the same config hash");
    out.push_back(std::move(cfg));
  }
  return out;
}

// ------------------------------------------------------------ run results

struct MetricRow {
  std::string phase;
  std::int64_t step = 0;
  std::uint64_t eval_seed = 0;
  std::int64_t episodes = 0;
  double mean_return = 0.0;
  double min_return = 0.0;
  double max_return = 0.0;
  double mean_score = 0.0;
};

struct RunResult {
  std::string arm;
  std::int64_t amb_size = 0;
  std::uint64_t run_seed = 0;
  std::string run;  // config hash hex
  bool complete = false;
  double score = 0.0;           // mean over final-phase rows
  std::vector<MetricRow> rows;  // train then final, metrics-file order
  std::string error;            // why the run aborted, when it did
};

inline void harvest_run(const RunDir& run, RunResult& rr) {
  rr.rows.clear();
  double sum = 0.0;
  std::int64_t finals = 0;
  for (const Json& row : run.summary.at("evals")) {
    MetricRow m;
    m.phase = row.at("phase").get<std::string>();
    m.step = row.at("step").get<std::int64_t>();
    m.eval_seed = row.at("eval_seed").get<std::uint64_t>();
    m.episodes = row.at("episodes").get<std::int64_t>();
    m.mean_return = row.at("mean_return").get<double>();
    m.min_return = row.at("min_return").get<double>();
    m.max_return = row.at("max_return").get<double>();
    m.mean_score = row.at("mean_score").get<double>();
    if (m.phase == "final") {
      sum += m.mean_score;
      ++finals;
    }
    rr.rows.push_back(std::move(m));
  }
  rr.complete = finals > 0;
  rr.score = finals > 0 ? sum / static_cast<double>(finals) : 0.0;
}

// ------------------------------------------------------------ aggregation

struct ArmCell {
  std::string arm;
  std::int64_t amb_size = 0;
  std::int64_t planned = 0;
  std::vector<double> scores;  // one per completed run, matrix order
  double mean = 0.0;
  double stdev = 0.0;  // sample std over runs
  bool complete() const {
    return static_cast<std::int64_t>(scores.size()) == planned;
  }
};

struct Verdict {
  std::string name;
  bool complete = false;  // every input cell present and fully seeded
  bool pass = false;
  double gap = 0.0;
  double pooled_se = 0.0;
  std::string detail;
};

struct ReportBundle {
  std::vector<RunResult> runs;
  std::vector<ArmCell> cells;
  std::vector<Verdict> verdicts;
};

inline double pooled_se(const ArmCell& a, const ArmCell& b) {
  auto term = [](const ArmCell& c) {
    double n = static_cast<double>(c.scores.size());
    return n > 0.0 ? c.stdev * c.stdev / n : 0.0;
  };
  return std::sqrt(term(a) + term(b));
}

inline std::string fmt_fixed(double v, int prec = 2) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

namespace detail {

inline const ArmCell* find_cell(const std::vector<ArmCell>& cells,
                                const std::string& arm, std::int64_t amb) {
  for (const ArmCell& c : cells)
    if (c.arm == arm && c.amb_size == amb) return &c;
  return nullptr;
}

inline const ArmCell* find_arm(const std::vector<ArmCell>& cells,
                               const std::string& arm) {
  for (const ArmCell& c : cells)
    if (c.arm == arm) return &c;
  return nullptr;
}

// Largest memory size an arm was run at; the headline comparisons use it.
inline std::int64_t headline_size(const std::vector<ArmCell>& cells,
                                  const std::string& arm) {
  std::int64_t best = -1;
  for (const ArmCell& c : cells)
    if (c.arm == arm) best = std::max(best, c.amb_size);
  return best;
}

inline std::string cell_label(const ArmCell& c) {
  return c.arm + "(amb " + std::to_string(c.amb_size) + ") " +
         fmt_fixed(c.mean);
}

}  // namespace detail

// The ordering claims the experiment exists to test, each reduced to one
// pass/fail with the measured gap. Cells that are missing or short of their
// planned seeds mark the verdict incomplete; the numbers still report
// whatever data is present.
inline std::vector<Verdict> ordering_verdicts(const std::vector<ArmCell>& cells) {
  std::vector<Verdict> out;
  const ArmCell* base = detail::find_arm(cells, "baseline_dt");
  auto top_cell = [&](const std::string& arm) {
    std::int64_t amb = detail::headline_size(cells, arm);
    return amb < 0 ? nullptr : detail::find_cell(cells, arm, amb);
  };
  auto missing_detail = [](std::initializer_list<const char*> arms) {
    std::string s = "missing arm(s):";
    for (const char* a : arms) s += std::string(" ") + a;
    return s;
  };

  {
    Verdict v;
    v.name = "expert_memory_gain";
    const ArmCell* re = top_cell("reframe_expert");
    if (base != nullptr && re != nullptr) {
      v.gap = re->mean - base->mean;
      v.pooled_se = pooled_se(*re, *base);
      v.pass = v.gap >= 3.0 && v.gap > 2.0 * v.pooled_se;
      v.complete = base->complete() && re->complete();
      v.detail = detail::cell_label(*re) + " vs " + detail::cell_label(*base) +
                 ": gap " + fmt_fixed(v.gap) + " (needs >= 3 and > 2x pooled SE " +
                 fmt_fixed(v.pooled_se) + ")";
    } else {
      v.detail = missing_detail({"baseline_dt", "reframe_expert"});
    }
    out.push_back(std::move(v));
  }

  {
    Verdict v;
    v.name = "swap_eval_no_gain";
    const ArmCell* sw = top_cell("reframe_swap_eval");
    if (base != nullptr && sw != nullptr) {
      v.gap = sw->mean - base->mean;
      v.pooled_se = pooled_se(*sw, *base);
      v.pass = v.gap <= 1.0;
      v.complete = base->complete() && sw->complete();
      v.detail = detail::cell_label(*sw) + " vs " + detail::cell_label(*base) +
                 ": gap " + fmt_fixed(v.gap) + " (needs <= 1)";
    } else {
      v.detail = missing_detail({"baseline_dt", "reframe_swap_eval"});
    }
    out.push_back(std::move(v));
  }

  {
    Verdict v;
    v.name = "dataset_memory_parity";
    const ArmCell* ds = top_cell("reframe_dataset_amb");
    if (base != nullptr && ds != nullptr) {
      v.gap = ds->mean - base->mean;
      v.pooled_se = pooled_se(*ds, *base);
      v.pass = std::fabs(v.gap) <= 3.0;
      v.complete = base->complete() && ds->complete();
      v.detail = detail::cell_label(*ds) + " vs " + detail::cell_label(*base) +
                 ": gap " + fmt_fixed(v.gap) + " (needs |gap| <= 3)";
    } else {
      v.detail = missing_detail({"baseline_dt", "reframe_dataset_amb"});
    }
    out.push_back(std::move(v));
  }

  {
    Verdict v;
    v.name = "memory_size_monotonic";
    std::vector<const ArmCell*> sweep;
    for (const ArmCell& c : cells)
      if (c.arm == "reframe_expert") sweep.push_back(&c);
    std::sort(sweep.begin(), sweep.end(),
              [](const ArmCell* a, const ArmCell* b) {
                return a->amb_size > b->amb_size;
              });
    if (sweep.size() >= 2) {
      bool mono = true;
      for (std::size_t i = 1; i < sweep.size(); ++i)
        if (sweep[i]->mean > sweep[i - 1]->mean) mono = false;
      v.gap = sweep.front()->mean - sweep.back()->mean;
      v.pooled_se = pooled_se(*sweep.front(), *sweep.back());
      v.pass = mono && v.gap > 2.0 * v.pooled_se;
      v.complete = true;
      std::string order;
      for (const ArmCell* c : sweep) {
        if (!order.empty()) order += " -> ";
        order += std::to_string(c->amb_size) + ": " + fmt_fixed(c->mean);
        v.complete = v.complete && c->complete();
      }
      v.detail = "reframe_expert score by memory size " + order +
                 "; endpoint gap " + fmt_fixed(v.gap) +
                 " (needs non-increasing and > 2x pooled SE " +
                 fmt_fixed(v.pooled_se) + ")";
    } else {
      v.detail = "needs reframe_expert at two or more memory sizes";
    }
    out.push_back(std::move(v));
  }

  {
    Verdict v;
    v.name = "finetune_weaker_than_memory";
    const ArmCell* ft = detail::find_arm(cells, "finetuned_dt");
    const ArmCell* re = top_cell("reframe_expert");
    if (base != nullptr && ft != nullptr && re != nullptr) {
      double gain_ft = ft->mean - base->mean;
      double gain_re = re->mean - base->mean;
      v.gap = gain_re - gain_ft;
      v.pass = gain_ft < gain_re;
      v.complete = base->complete() && ft->complete() && re->complete();
      v.detail = "gains over baseline_dt: finetuned_dt " + fmt_fixed(gain_ft) +
                 " vs reframe_expert(amb " + std::to_string(re->amb_size) +
                 ") " + fmt_fixed(gain_re) + " (fine-tuning must gain less)";
    } else {
      v.detail = missing_detail({"baseline_dt", "finetuned_dt", "reframe_expert"});
    }
    out.push_back(std::move(v));
  }

  return out;
}

inline void aggregate_bundle(ReportBundle& b) {
  b.cells.clear();
  auto cell_of = [&b](const std::string& arm, std::int64_t amb) -> ArmCell& {
    for (ArmCell& c : b.cells)
      if (c.arm == arm && c.amb_size == amb) return c;
    b.cells.push_back({arm, amb, 0, {}, 0.0, 0.0});
    return b.cells.back();
  };
  for (const RunResult& r : b.runs) {
    ArmCell& c = cell_of(r.arm, r.amb_size);
    ++c.planned;
    if (r.complete) c.scores.push_back(r.score);
  }
  for (ArmCell& c : b.cells) {
    c.mean = mean_of(c.scores);
    c.stdev = sample_std(c.scores);
  }
  b.verdicts = ordering_verdicts(b.cells);
}

// ------------------------------------------------------------- executor

// Called before each matrix entry executes (result == nullptr) and again
// once it finished or aborted (result set).
using AblateProgress = std::function<void(
    std::size_t idx, std::size_t total, const MatrixEntry&, const RunResult*)>;

// Runs every matrix entry to completion, skipping work already recorded in
// its run directory. An aborting arm is noted and the matrix continues; its
// cell simply comes up short of planned runs.
inline ReportBundle ablate(const RunConfig& base, const AblationMatrix& m,
                           const std::filesystem::path& out_root,
                           const AblateProgress& progress = {}) {
  std::vector<RunConfig> cfgs = expand_matrix(base, m);
  ReportBundle bundle;
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    const MatrixEntry& e = m.entries[i];
    RunResult rr;
    rr.arm = e.arm;
    rr.amb_size = e.amb_size;
    rr.run_seed = e.seed;
    rr.run = config_hash_hex(cfgs[i]);
    if (progress) progress(i, cfgs.size(), e, nullptr);
    try {
      RunDir run = open_run(cfgs[i], out_root);
      run_full(run);
      harvest_run(run, rr);
    } catch (const std::exception& ex) {
      rr.error = ex.what();
      try {  // keep whatever the run managed to record before it died
        RunDir run = open_run(cfgs[i], out_root);
        harvest_run(run, rr);
      } catch (...) {
      }
    }
    if (progress) progress(i, cfgs.size(), e, &rr);
    bundle.runs.push_back(std::move(rr));
  }
  aggregate_bundle(bundle);
  return bundle;
}

inline ReportBundle ablate(const RunConfig& base, const AblationMatrix& m) {
  return ablate(base, m, default_out_root());
}

// --------------------------------------------------------------- raw csv

// One row per evaluation across every run in the bundle; everything the
// report shows is recomputable from these rows.
inline std::string render_bundle_csv(const ReportBundle& b) {
  std::string out =
      "run,arm,amb_size,run_seed,phase,step,eval_seed,episodes,mean_return,"
      "min_return,max_return,mean_score\n";
  for (const RunResult& r : b.runs) {
    std::string prefix = r.run + "," + r.arm + "," +
                         std::to_string(r.amb_size) + "," +
                         std::to_string(r.run_seed) + ",";
    for (const MetricRow& row : r.rows) {
      out += prefix + row.phase;
      out += "," + std::to_string(row.step);
      out += "," + std::to_string(row.eval_seed);
      out += "," + std::to_string(row.episodes);
      out += "," + format_f64(row.mean_return);
      out += "," + format_f64(row.min_return);
      out += "," + format_f64(row.max_return);
      out += "," + format_f64(row.mean_score);
      out += "\n";
    }
  }
  return out;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

inline double parse_csv_double(const std::string& s) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw FormatError("bad number '" + s + "' in metrics csv", 0);
  return v;
}

}  // namespace detail

// Rebuilds a bundle from a previously written raw CSV: rows group by run in
// file order. Runs that never reached a final evaluation show up with only
// train rows; runs the CSV does not mention cannot be recovered, so planned
// counts equal what the file holds.
inline ReportBundle bundle_from_csv(const std::string& csv) {
  ReportBundle b;
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line))
    throw FormatError("metrics csv is empty", 0);
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f = detail::split_csv_line(line);
    if (f.size() != 12)
      throw FormatError("metrics csv line " + std::to_string(lineno) +
                            " has " + std::to_string(f.size()) +
                            " fields, wants 12",
                        0);
    if (b.runs.empty() || b.runs.back().run != f[0]) {
      RunResult rr;
      rr.run = f[0];
      rr.arm = f[1];
      rr.amb_size = std::strtoll(f[2].c_str(), nullptr, 10);
      rr.run_seed = std::strtoull(f[3].c_str(), nullptr, 10);
      b.runs.push_back(std::move(rr));
    }
    MetricRow m;
    m.phase = f[4];
    m.step = std::strtoll(f[5].c_str(), nullptr, 10);
    m.eval_seed = std::strtoull(f[6].c_str(), nullptr, 10);
    m.episodes = std::strtoll(f[7].c_str(), nullptr, 10);
    m.mean_return = detail::parse_csv_double(f[8]);
    m.min_return = detail::parse_csv_double(f[9]);
    m.max_return = detail::parse_csv_double(f[10]);
    m.mean_score = detail::parse_csv_double(f[11]);
    b.runs.back().rows.push_back(std::move(m));
  }
  for (RunResult& r : b.runs) {
    double sum = 0.0;
    std::int64_t finals = 0;
    for (const MetricRow& m : r.rows)
      if (m.phase == "final") {
        sum += m.mean_score;
        ++finals;
      }
    r.complete = finals > 0;
    r.score = finals > 0 ? sum / static_cast<double>(finals) : 0.0;
  }
  aggregate_bundle(b);
  return b;
}

}  // namespace reframe
