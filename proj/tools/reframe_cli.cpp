// Command-line front end: dataset generation, the two training stages,
// evaluation, fine-tuning, the ablation matrix, and report emission.
// Every subcommand resolves a config (file, then --override pairs, then
// --seed), opens the run directory keyed by the config hash, and leaves the
// fully resolved config beside its outputs.
//
// Exit codes: 0 success, 2 unknown config key, 3 missing artifact
// dependency, 1 anything else. Failures print one "error code=N: ..." line.
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "reframe/report.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::int64_t seed = 0;
  std::string out_dir;
  CLI::Option* seed_opt = nullptr;
};

reframe::RunConfig resolve_config(const CommonArgs& a) {
  std::vector<std::string> ovs = a.overrides;
  if (a.seed_opt != nullptr && a.seed_opt->count() > 0)
    ovs.push_back("run.seed=" + std::to_string(a.seed));
  return reframe::load_run_config(a.config_path, ovs);
}

std::filesystem::path resolve_root(const CommonArgs& a) {
  if (!a.out_dir.empty()) return std::filesystem::path(a.out_dir);
  return reframe::default_out_root();
}

void print_op_warnings(const reframe::Json& rec) {
  if (!rec.contains("warnings")) return;
  for (const reframe::Json& w : rec["warnings"])
    std::printf("  warning: %s\n", w.get<std::string>().c_str());
}

int run_stage_op(const CommonArgs& a, const std::string& op) {
  reframe::RunConfig cfg = resolve_config(a);
  reframe::RunDir run = reframe::open_run(cfg, resolve_root(a));
  reframe::run_op(run, op);
  const reframe::Json& rec = run.summary["ops"][op];
  double wall =
      rec.contains("wall_seconds") ? rec["wall_seconds"].get<double>() : 0.0;
  std::printf("run %s: %s done in %.1fs\n", reframe::hash_hex(run.hash).c_str(),
              op.c_str(), wall);
  std::printf("  dir %s\n", run.paths.dir.string().c_str());
  if (op == "eval")
    std::printf("  mean_score %.2f  std %.2f\n",
                rec["mean_score"].get<double>(),
                rec["std_score"].get<double>());
  print_op_warnings(rec);
  return 0;
}

int run_ablate(const CommonArgs& a, const std::vector<std::string>& arms,
               const std::vector<std::int64_t>& sizes,
               const std::vector<std::uint64_t>& run_seeds) {
  reframe::RunConfig base = resolve_config(a);
  std::filesystem::path root = resolve_root(a);
  reframe::AblationMatrix m = reframe::build_matrix(arms, sizes, run_seeds);
  std::printf("ablation matrix: %zu runs\n", m.entries.size());
  std::fflush(stdout);
  auto progress = [](std::size_t i, std::size_t n,
                     const reframe::MatrixEntry& e,
                     const reframe::RunResult* done) {
    if (done == nullptr) {
      std::printf("[%zu/%zu] %s amb=%lld seed=%llu ...\n", i + 1, n,
                  e.arm.c_str(), static_cast<long long>(e.amb_size),
                  static_cast<unsigned long long>(e.seed));
    } else if (!done->error.empty()) {
      std::printf("[%zu/%zu] aborted: %s\n", i + 1, n, done->error.c_str());
    } else {
      std::printf("[%zu/%zu] score %.2f (run %s)\n", i + 1, n, done->score,
                  done->run.c_str());
    }
    std::fflush(stdout);
  };
  reframe::ReportBundle bundle = reframe::ablate(base, m, root, progress);
  std::vector<std::filesystem::path> files =
      reframe::write_report(bundle, root / "report");
  std::fputs(reframe::render_summary_text(bundle).c_str(), stdout);
  for (const std::filesystem::path& f : files)
    std::printf("wrote %s\n", f.string().c_str());
  return 0;
}

int run_report(const CommonArgs& a, const std::string& csv_arg) {
  std::filesystem::path root = resolve_root(a);
  std::filesystem::path csv = csv_arg.empty()
                                  ? root / "report" / "aggregate.csv"
                                  : std::filesystem::path(csv_arg);
  if (!std::filesystem::exists(csv))
    throw reframe::MissingArtifactError(csv.string());
  std::ifstream is(csv, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  reframe::ReportBundle bundle = reframe::bundle_from_csv(ss.str());
  std::filesystem::path dir =
      a.out_dir.empty() ? csv.parent_path() : std::filesystem::path(a.out_dir);
  std::vector<std::filesystem::path> files = reframe::write_report(bundle, dir);
  std::fputs(reframe::render_summary_text(bundle).c_str(), stdout);
  for (const std::filesystem::path& f : files)
    std::printf("wrote %s\n", f.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "offline-RL toolkit: decision-transformer policies with an associative "
      "memory buffer"};
  app.require_subcommand(1);

  struct Sub {
    CLI::App* cmd = nullptr;
    CommonArgs args;
  };
  std::map<std::string, Sub> subs;
  auto add_sub = [&app, &subs](const std::string& name,
                               const std::string& help) -> Sub& {
    Sub& s = subs[name];
    s.cmd = app.add_subcommand(name, help);
    s.cmd->add_option("--config", s.args.config_path,
                      "config file (sectioned key = value text)");
    s.cmd->add_option("--override", s.args.overrides,
                      "KEY=VALUE, repeatable, applied after the config file");
    s.args.seed_opt = s.cmd->add_option(
        "--seed", s.args.seed, "run seed (shorthand for run.seed=N, wins last)");
    s.cmd->add_option("--out", s.args.out_dir,
                      "output root (default $RF_OUT_DIR, else ./out)");
    return s;
  };

  add_sub("gen-data",
          "generate the training dataset and the buffer-source set");
  add_sub("train-ae", "train the stage-1 autoencoder on the buffer-source set");
  add_sub("build-amb", "encode the buffer-source set into the memory buffer");
  add_sub("train-policy", "stage-2 policy optimization on the main dataset");
  add_sub("eval", "evaluate the arm's checkpoint and record final metrics");
  add_sub("finetune", "continue the baseline checkpoint on the expert set");

  Sub& ablate_sub =
      add_sub("ablate", "run the ablation matrix and write the report");
  std::vector<std::string> arms = reframe::arm_names();
  std::vector<std::int64_t> sizes = {60, 45, 30};
  std::vector<std::uint64_t> run_seeds = {1, 2, 3};
  ablate_sub.cmd->add_option("--arms", arms, "arms to run (comma separated)")
      ->delimiter(',');
  ablate_sub.cmd
      ->add_option("--sizes", sizes, "memory sizes swept over the memory arms")
      ->delimiter(',');
  ablate_sub.cmd
      ->add_option("--run-seeds", run_seeds, "run seeds replicated per arm")
      ->delimiter(',');

  Sub& report_sub =
      add_sub("report", "regenerate report files from a raw metrics csv");
  std::string csv_path;
  report_sub.cmd->add_option(
      "--csv", csv_path, "aggregate csv (default <out>/report/aggregate.csv)");

  CLI11_PARSE(app, argc, argv);

  try {
    for (const char* op : {"gen-data", "train-ae", "build-amb", "train-policy",
                           "eval", "finetune"})
      if (subs[op].cmd->parsed()) {
        std::string lib_op = op;
        for (char& c : lib_op)
          if (c == '-') c = '_';
        return run_stage_op(subs[op].args, lib_op);
      }
    if (ablate_sub.cmd->parsed())
      return run_ablate(ablate_sub.args, arms, sizes, run_seeds);
    if (report_sub.cmd->parsed()) return run_report(report_sub.args, csv_path);
    std::fprintf(stderr, "error code=1: no subcommand\n");
    return 1;
  } catch (const reframe::UnknownKeyError& e) {
    std::fprintf(stderr, "error code=2: %s\n", e.what());
    return 2;
  } catch (const reframe::MissingArtifactError& e) {
    std::fprintf(stderr, "error code=3: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error code=1: %s\n", e.what());
    return 1;
  }
}
