#include <catch2/catch_amalgamated.hpp>

#include <reframe/ablation.hpp>
#include <reframe/report.hpp>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace reframe;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("reframe_abl_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

RunConfig smoke_cfg() {
  RunConfig c;
  c.n_traj = 40;
  c.data_seed = 3;
  c.amb_size = 6;
  c.buffer_seed = 5;
  c.ae_e_rtg = 2;
  c.ae_e_obs = 4;
  c.ae_e_act = 2;
  c.ae_n_latent = 4;
  c.ae_hidden = 16;
  c.ae_steps = 150;
  c.ae_batch = 32;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.context_k = 8;
  c.train_steps = 30;
  c.train_batch = 8;
  c.eval_episodes = 2;
  c.eval_seeds = 2;
  c.finetune_steps = 10;
  c.run_seed = 11;
  return c;
}

// One synthetic run: a couple of train rows for the curves plus one final
// row per eval seed carrying the score.
RunResult make_run(const std::string& arm, std::int64_t amb,
                   std::uint64_t seed, double score, bool complete = true) {
  RunResult rr;
  rr.arm = arm;
  rr.amb_size = amb;
  rr.run_seed = seed;
  rr.run = arm + std::to_string(amb) + "s" + std::to_string(seed);
  rr.complete = complete;
  rr.score = complete ? score : 0.0;
  for (std::int64_t step : {50, 100}) {
    MetricRow t;
    t.phase = "train";
    t.step = step;
    t.eval_seed = seed;
    t.episodes = 2;
    t.mean_return = -100.0 + score;
    t.min_return = -120.0 + score;
    t.max_return = -80.0 + score;
    t.mean_score = score - 5.0 + static_cast<double>(step) / 20.0;
    rr.rows.push_back(t);
  }
  if (complete) {
    MetricRow f;
    f.phase = "final";
    f.step = 100;
    f.eval_seed = seed;
    f.episodes = 2;
    f.mean_return = -90.0 + score;
    f.min_return = -110.0 + score;
    f.max_return = -70.0 + score;
    f.mean_score = score;
    rr.rows.push_back(f);
  }
  return rr;
}

// All five arms at their headline size, the expert arm swept over three
// sizes, three seeds each, scores arranged so every ordering claim holds.
ReportBundle synthetic_bundle() {
  ReportBundle b;
  std::map<std::pair<std::string, std::int64_t>, double> center = {
      {{"baseline_dt", 60}, 51.0},     {{"finetuned_dt", 60}, 55.0},
      {{"reframe_expert", 60}, 61.0},  {{"reframe_expert", 45}, 58.0},
      {{"reframe_expert", 30}, 54.0},  {{"reframe_swap_eval", 60}, 51.0},
      {{"reframe_dataset_amb", 60}, 50.0}};
  for (const auto& [key, mid] : center)
    for (std::uint64_t seed : {1, 2, 3})
      b.runs.push_back(make_run(key.first, key.second, seed,
                                mid + static_cast<double>(seed) - 2.0));
  aggregate_bundle(b);
  return b;
}

const ArmCell& cell(const ReportBundle& b, const std::string& arm,
                    std::int64_t amb) {
  for (const ArmCell& c : b.cells)
    if (c.arm == arm && c.amb_size == amb) return c;
  FAIL("no cell " << arm << " " << amb);
  static ArmCell dummy;
  return dummy;
}

const Verdict& verdict(const ReportBundle& b, const std::string& name) {
  for (const Verdict& v : b.verdicts)
    if (v.name == name) return v;
  FAIL("no verdict " << name);
  static Verdict dummy;
  return dummy;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("default matrix sweeps sizes over memory arms only") {
  AblationMatrix m = default_matrix();
  REQUIRE(m.entries.size() == 33);
  std::map<std::string, int> per_arm;
  for (const MatrixEntry& e : m.entries) {
    per_arm[e.arm] += 1;
    if (e.arm == "baseline_dt" || e.arm == "finetuned_dt")
      REQUIRE(e.amb_size == 60);
  }
  REQUIRE(per_arm["baseline_dt"] == 3);
  REQUIRE(per_arm["finetuned_dt"] == 3);
  REQUIRE(per_arm["reframe_expert"] == 9);
  REQUIRE(per_arm["reframe_swap_eval"] == 9);
  REQUIRE(per_arm["reframe_dataset_amb"] == 9);

  // every entry resolves to a distinct, valid run config
  std::vector<RunConfig> cfgs = expand_matrix(RunConfig{}, m);
  std::set<std::uint64_t> hashes;
  for (const RunConfig& c : cfgs) REQUIRE(hashes.insert(config_hash(c)).second);
  REQUIRE(hashes.size() == 33);

  REQUIRE_THROWS_AS(build_matrix({"baseline_dt"}, {}, {1}), ArgumentError);
  REQUIRE_THROWS_AS(build_matrix({"baseline_dt"}, {60}, {}), ArgumentError);

  // entries that collapse to the same config are refused
  AblationMatrix dup;
  dup.entries = {m.entries[0], m.entries[0]};
  REQUIRE_THROWS_AS(expand_matrix(RunConfig{}, dup), ConfigError);
}

TEST_CASE("aggregation matches hand arithmetic") {
  ReportBundle b = synthetic_bundle();
  REQUIRE(b.runs.size() == 21);
  REQUIRE(b.cells.size() == 7);

  const ArmCell& base = cell(b, "baseline_dt", 60);
  REQUIRE(base.planned == 3);
  REQUIRE(base.complete());
  REQUIRE(base.mean == 51.0);
  REQUIRE(base.stdev == 1.0);

  const ArmCell& re = cell(b, "reframe_expert", 60);
  REQUIRE(re.mean == 61.0);
  REQUIRE(pooled_se(re, base) == Catch::Approx(std::sqrt(2.0 / 3.0)));
}

TEST_CASE("ordering verdicts pass on a clean separation") {
  ReportBundle b = synthetic_bundle();
  REQUIRE(b.verdicts.size() == 5);

  const Verdict& gain = verdict(b, "expert_memory_gain");
  REQUIRE(gain.complete);
  REQUIRE(gain.pass);
  REQUIRE(gain.gap == 10.0);
  REQUIRE(gain.pooled_se == Catch::Approx(std::sqrt(2.0 / 3.0)));

  const Verdict& swap = verdict(b, "swap_eval_no_gain");
  REQUIRE(swap.pass);
  REQUIRE(swap.gap == 0.0);

  const Verdict& parity = verdict(b, "dataset_memory_parity");
  REQUIRE(parity.pass);
  REQUIRE(parity.gap == -1.0);

  const Verdict& mono = verdict(b, "memory_size_monotonic");
  REQUIRE(mono.pass);
  REQUIRE(mono.gap == 7.0);  // 61 at size 60 down to 54 at size 30

  const Verdict& ft = verdict(b, "finetune_weaker_than_memory");
  REQUIRE(ft.pass);
  REQUIRE(ft.gap == 6.0);  // memory gain 10 vs fine-tune gain 4
}

TEST_CASE("ordering verdicts fail when the ordering breaks") {
  ReportBundle b;
  // memory barely helps, swap helps too much, sizes non-monotonic,
  // fine-tuning beats memory
  for (std::uint64_t s : {1, 2, 3}) {
    double d = static_cast<double>(s) - 2.0;
    b.runs.push_back(make_run("baseline_dt", 60, s, 51.0 + d));
    b.runs.push_back(make_run("finetuned_dt", 60, s, 58.0 + d));
    b.runs.push_back(make_run("reframe_expert", 60, s, 53.0 + d));
    b.runs.push_back(make_run("reframe_expert", 45, s, 56.0 + d));
    b.runs.push_back(make_run("reframe_expert", 30, s, 52.0 + d));
    b.runs.push_back(make_run("reframe_swap_eval", 60, s, 56.0 + d));
    b.runs.push_back(make_run("reframe_dataset_amb", 60, s, 56.0 + d));
  }
  aggregate_bundle(b);
  REQUIRE(!verdict(b, "expert_memory_gain").pass);        // gap 2 < 3
  REQUIRE(!verdict(b, "swap_eval_no_gain").pass);         // gap 5 > 1
  REQUIRE(!verdict(b, "dataset_memory_parity").pass);     // gap 5 > 3
  REQUIRE(!verdict(b, "memory_size_monotonic").pass);     // 45 beats 60
  REQUIRE(!verdict(b, "finetune_weaker_than_memory").pass);
}

TEST_CASE("short cells mark their verdicts incomplete") {
  ReportBundle b = synthetic_bundle();
  // one baseline run aborts: planned 3, scored 2
  for (RunResult& r : b.runs)
    if (r.arm == "baseline_dt" && r.run_seed == 3) {
      r.complete = false;
      r.error = "boom";
      r.rows.pop_back();  // drop the final row
    }
  aggregate_bundle(b);
  REQUIRE(!cell(b, "baseline_dt", 60).complete());
  REQUIRE(!verdict(b, "expert_memory_gain").complete);
  // the size sweep never consumes the baseline, so it stays complete
  REQUIRE(verdict(b, "memory_size_monotonic").complete);

  std::string text = render_summary_text(b);
  REQUIRE(text.find("[incomplete]") != std::string::npos);
  REQUIRE(text.find("aborted runs") != std::string::npos);
  REQUIRE(text.find("boom") != std::string::npos);

  // verdicts missing their arms entirely say which ones
  ReportBundle lone;
  lone.runs.push_back(make_run("baseline_dt", 60, 1, 50.0));
  aggregate_bundle(lone);
  const Verdict& v = verdict(lone, "expert_memory_gain");
  REQUIRE(!v.complete);
  REQUIRE(!v.pass);
  REQUIRE(v.detail.find("missing arm(s)") != std::string::npos);
}

TEST_CASE("bundle csv round trips exactly") {
  ReportBundle b = synthetic_bundle();
  std::string csv = render_bundle_csv(b);
  ReportBundle back = bundle_from_csv(csv);
  REQUIRE(render_bundle_csv(back) == csv);
  REQUIRE(back.runs.size() == b.runs.size());
  REQUIRE(back.cells.size() == b.cells.size());
  for (std::size_t i = 0; i < b.cells.size(); ++i) {
    REQUIRE(back.cells[i].arm == b.cells[i].arm);
    REQUIRE(back.cells[i].mean == b.cells[i].mean);
    REQUIRE(back.cells[i].stdev == b.cells[i].stdev);
  }
  for (std::size_t i = 0; i < b.verdicts.size(); ++i) {
    REQUIRE(back.verdicts[i].pass == b.verdicts[i].pass);
    REQUIRE(back.verdicts[i].gap == b.verdicts[i].gap);
  }

  REQUIRE_THROWS_AS(bundle_from_csv(""), FormatError);
  std::string header = csv.substr(0, csv.find('\n') + 1);
  REQUIRE_THROWS_AS(bundle_from_csv(header + "a,b,c\n"), FormatError);
  REQUIRE_THROWS_AS(
      bundle_from_csv(header + "r,arm,60,1,final,1,1,2,x,0,0,0\n"),
      FormatError);
}

TEST_CASE("report files are deterministic and complete") {
  ReportBundle b = synthetic_bundle();
  TempDir d1, d2;
  std::vector<fs::path> files = write_report(b, d1.path);
  std::set<std::string> names;
  for (const fs::path& f : files) names.insert(f.filename().string());
  REQUIRE(names.count("summary.txt") == 1);
  REQUIRE(names.count("aggregate.csv") == 1);
  REQUIRE(names.count("score_vs_amb_size.svg") == 1);
  for (const std::string& arm : arm_names())
    REQUIRE(names.count("curve_" + arm + ".svg") == 1);

  REQUIRE(slurp(d1.path / "aggregate.csv") == render_bundle_csv(b));
  std::string summary = slurp(d1.path / "summary.txt");
  REQUIRE(summary.find("PASS") != std::string::npos);
  REQUIRE(summary.find("expert_memory_gain") != std::string::npos);

  // the size axis ticks at exactly the swept sizes
  std::string svg = slurp(d1.path / "score_vs_amb_size.svg");
  for (const char* tick : {">30<", ">45<", ">60<"})
    REQUIRE(svg.find(tick) != std::string::npos);

  // regeneration is byte-identical
  write_report(b, d2.path);
  for (const fs::path& f : files)
    REQUIRE(slurp(f) == slurp(d2.path / f.filename()));

  // an empty bundle still writes the text outputs, but no plots
  TempDir d3;
  std::vector<fs::path> empty_files = write_report(ReportBundle{}, d3.path);
  REQUIRE(empty_files.size() == 2);
  REQUIRE(!fs::exists(d3.path / "score_vs_amb_size.svg"));
}

TEST_CASE("ablation executes, resumes, and contains aborts") {
  TempDir root_a, root_b;
  RunConfig base = smoke_cfg();
  AblationMatrix m =
      build_matrix({"baseline_dt", "reframe_expert"}, {6}, {1, 2}, 6);
  REQUIRE(m.entries.size() == 4);

  std::size_t calls = 0;
  ReportBundle full = ablate(base, m, root_a.path,
                             [&](std::size_t, std::size_t total,
                                 const MatrixEntry&, const RunResult* r) {
                               ++calls;
                               REQUIRE(total == 4);
                               if (r != nullptr) REQUIRE(r->error.empty());
                             });
  REQUIRE(calls == 8);  // before and after each entry
  REQUIRE(full.runs.size() == 4);
  for (const RunResult& r : full.runs) REQUIRE(r.complete);
  REQUIRE(full.cells.size() == 2);
  std::string csv = render_bundle_csv(full);

  // rerunning over the same directories is a no-op with identical output
  ReportBundle again = ablate(base, m, root_a.path);
  REQUIRE(render_bundle_csv(again) == csv);

  // a half-finished matrix picks up where it stopped
  AblationMatrix first_half;
  first_half.entries = {m.entries[0], m.entries[1]};
  ablate(base, first_half, root_b.path);
  ReportBundle resumed = ablate(base, m, root_b.path);
  REQUIRE(render_bundle_csv(resumed) == csv);
}

TEST_CASE("an aborting run does not sink the matrix") {
  TempDir root;
  RunConfig base = smoke_cfg();
  AblationMatrix m = build_matrix({"baseline_dt"}, {6}, {1, 2}, 6);

  // poison the first run's directory with a conflicting stored config
  std::vector<RunConfig> cfgs = expand_matrix(base, m);
  RunPaths paths = run_paths(cfgs[0], root.path);
  fs::create_directories(paths.dir);
  RunConfig other = cfgs[0];
  other.train_steps += 1;
  write_text_file(paths.config_file(), render_config(other));

  ReportBundle b = ablate(base, m, root.path);
  REQUIRE(b.runs.size() == 2);
  REQUIRE(!b.runs[0].complete);
  REQUIRE(!b.runs[0].error.empty());
  REQUIRE(b.runs[1].complete);
  const ArmCell& c = cell(b, "baseline_dt", 6);
  REQUIRE(c.planned == 2);
  REQUIRE(c.scores.size() == 1);
  std::string text = render_summary_text(b);
  REQUIRE(text.find("aborted runs") != std::string::npos);
}
