// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line driver for the two-stage grounding pipeline.
//
//   miggrpo gen     --out data/
//   miggrpo curate  --stage cot --tasks data/train.jsonl --out cot/
//   miggrpo train   --stage sft --tasks data/train.jsonl --cot cot/cot_kept.jsonl --out sft/
//   miggrpo curate  --stage rs  --tasks data/train.jsonl --model sft/sft_merged.ckpt --out rs/
//   miggrpo train   --stage rl  --tasks rs/rs_tasks.jsonl --model sft/sft_merged.ckpt --out rl/
//   miggrpo eval    --model rl/rl_final.ckpt --tasks data/heldout.jsonl --out eval/ --name stage2
//   miggrpo report  eval/stage1_report.json eval/stage2_report.json
//
// The config comes from --config, else $MIGGRPO_CONFIG, else built-in
// defaults; --set section.key=value overrides individual entries.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "miggrpo/checkpoint.hpp"
#include "miggrpo/config.hpp"
#include "miggrpo/errors.hpp"
#include "miggrpo/jsonl.hpp"
#include "miggrpo/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace miggrpo;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  int workers = 0;  // 0: keep config value
};

Pipeline make_pipeline(const Common& c) {
  fs::path path = c.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv("MIGGRPO_CONFIG"); env != nullptr && *env != '\0') path = env;
  }
  json cfg = load_config(path, c.overrides);
  if (c.workers > 0) cfg["workers"] = c.workers;
  return Pipeline(std::move(cfg));
}

json stamped(json record, const Pipeline& p) {
  record["provenance"] = p.provenance_json();
  return record;
}

void write_records(const fs::path& path, const std::vector<json>& records, const Pipeline& p) {
  std::vector<json> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(stamped(r, p));
  write_jsonl(path, out);
}

std::vector<GroundingTask> read_tasks(const fs::path& path) {
  std::vector<GroundingTask> out;
  for (const auto& j : read_jsonl(path)) out.push_back(task_from_json(j));
  if (out.empty()) throw DataError(path.string() + " holds no tasks");
  return out;
}

void write_tasks(const fs::path& path, std::span<const GroundingTask> tasks, const Pipeline& p) {
  std::vector<json> recs;
  for (const auto& t : tasks) recs.push_back(to_json(t));
  write_records(path, recs, p);
}

std::vector<TeacherSample> read_samples(const fs::path& path) {
  std::vector<TeacherSample> out;
  for (const auto& j : read_jsonl(path)) out.push_back(teacher_sample_from_json(j));
  return out;
}

void write_samples(const fs::path& path, std::span<const TeacherSample> samples, const Pipeline& p) {
  std::vector<json> recs;
  for (const auto& s : samples) recs.push_back(to_json(s));
  write_records(path, recs, p);
}

PolicyParams load_model(const std::string& path) {
  if (path.empty()) throw DataError("a model checkpoint is required (--model)");
  if (!fs::exists(path)) throw DataError("checkpoint not found: " + path);
  return load_checkpoint(path).params;
}

void save_model(const fs::path& path, const PolicyParams& params, const Pipeline& p, const std::string& stage,
                std::uint64_t step) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_checkpoint(path, params, p.provenance(stage, step));
}

std::string step_name(int it) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "rl_step_%06d.ckpt", it);
  return buf;
}

// -- gen --------------------------------------------------------------------

struct GenArgs {
  std::string out = "data";
};

void cmd_gen(const Common& c, const GenArgs& a) {
  const Pipeline p = make_pipeline(c);
  const Splits s = p.generate();
  write_tasks(fs::path(a.out) / "train.jsonl", s.train, p);
  write_tasks(fs::path(a.out) / "heldout.jsonl", s.heldout, p);
  std::cout << "wrote " << s.train.size() << " train and " << s.heldout.size() << " held-out tasks to " << a.out
            << " (config " << p.hash() << ")\n";
}

// -- curate -----------------------------------------------------------------

struct CurateArgs {
  std::string stage;
  std::string tasks;
  std::string teacher;
  std::string model;
  std::string out = "curated";
};

void cmd_curate(const Common& c, const CurateArgs& a) {
  const Pipeline p = make_pipeline(c);
  const auto tasks = read_tasks(a.tasks);
  const fs::path out = a.out;
  if (a.stage == "cot") {
    std::vector<TeacherSample> samples;
    if (a.teacher.empty()) {
      samples = p.teach(tasks);
      write_samples(out / "teacher.jsonl", samples, p);
    } else {
      samples = read_samples(a.teacher);
    }
    const ConsistencyResult r = consistency_filter(samples, tasks, p.eval_threshold());
    const std::unordered_set<std::string> keep(r.kept_ids.begin(), r.kept_ids.end());
    std::vector<TeacherSample> kept;
    for (const auto& s : samples) {
      if (keep.contains(s.task_id)) kept.push_back(s);
    }
    write_samples(out / "cot_kept.jsonl", kept, p);
    json stats = stamped(to_json(r.stats), p);
    stats["stage"] = "cot";
    write_json(out / "cot_stats.json", stats);
    std::cout << "cot: kept " << r.stats.kept << "/" << r.stats.total << "\n";
    return;
  }
  // rs
  const PolicyParams model = load_model(a.model);
  const RejectionResult r = p.rejection(model, tasks);
  write_tasks(out / "rs_tasks.jsonl", select_tasks(tasks, r.kept_ids), p);
  std::vector<json> log;
  for (const auto& e : r.log) log.push_back(to_json(e));
  write_records(out / "rs_log.jsonl", log, p);
  json stats = stamped(to_json(r), p);
  stats["stage"] = "rs";
  write_json(out / "rs_stats.json", stats);
  std::cout << "rs: kept " << r.stats.kept << "/" << r.stats.total << "\n";
}

// -- train ------------------------------------------------------------------

struct TrainArgs {
  std::string stage;
  std::string tasks;
  std::string cot;
  std::string model;
  std::string resume;
  std::string out = "run";
  bool allow_cold_rl = false;
};

void cmd_train_sft(const Pipeline& p, const TrainArgs& a) {
  if (a.cot.empty()) throw DataError("sft needs the curated CoT samples (--cot)");
  const auto tasks = read_tasks(a.tasks);
  const auto samples = read_samples(a.cot);
  std::vector<std::string> ids;
  for (const auto& s : samples) ids.push_back(s.task_id);
  const auto data = p.sft_dataset(tasks, samples, ids);
  const PolicyParams base = a.model.empty() ? p.base_policy() : load_model(a.model);
  const auto r = p.train_sft(base, data);
  const fs::path out = a.out;
  const auto epochs = static_cast<std::uint64_t>(r.loss_trace.size());
  std::vector<json> trace;
  for (std::size_t e = 0; e < r.loss_trace.size(); ++e) trace.push_back({{"epoch", e}, {"loss", r.loss_trace[e]}});
  write_records(out / "sft_loss.jsonl", trace, p);
  save_model(out / "sft_adapter.ckpt", r.trained, p, "sft", epochs);
  save_model(out / "sft_merged.ckpt", r.merged, p, "sft-merged", epochs);
  std::cout << "sft: " << data.size() << " examples, final loss "
            << (r.loss_trace.empty() ? sft_loss(r.merged, data) : r.loss_trace.back()) << "\n";
}

void cmd_train_rl(const Pipeline& p, const TrainArgs& a) {
  const auto tasks = read_tasks(a.tasks);
  PolicyParams reference;
  if (!a.model.empty()) {
    reference = load_model(a.model);
  } else if (a.allow_cold_rl) {
    reference = p.base_policy();
  } else {
    throw DataError("rl needs the merged stage-1 checkpoint (--model); pass --allow-cold-rl to start from the base policy");
  }
  if (reference.adapter) throw DataError("rl expects a merged checkpoint without an adapter");

  PolicyParams initial = reference;
  int start = 0;
  if (!a.resume.empty()) {
    if (!fs::exists(a.resume)) throw DataError("checkpoint not found: " + a.resume);
    const Checkpoint ck = load_checkpoint(a.resume);
    if (ck.provenance.config_hash != p.hash()) {
      throw DataError("resume checkpoint was written under config " + ck.provenance.config_hash + ", not " + p.hash());
    }
    initial = ck.params;
    start = static_cast<int>(ck.provenance.step);
  }

  const fs::path out = a.out;
  const fs::path log_path = out / "rl_log.jsonl";
  std::vector<json> log;
  if (start > 0 && fs::exists(log_path)) {
    for (auto& j : read_jsonl(log_path)) {
      if (j.at("iteration").get<int>() < start) log.push_back(std::move(j));
    }
  }
  fs::create_directories(out);
  const int every = p.config().at("grpo").at("checkpoint_every").get<int>();
  const fs::path rollouts_path = out / "rl_rollouts.jsonl";
  std::vector<json> rollouts;
  if (start > 0 && fs::exists(rollouts_path)) {
    for (auto& j : read_jsonl(rollouts_path)) {
      if (j.at("iteration").get<int>() < start) rollouts.push_back(std::move(j));
    }
  }
  const auto r = p.train_rl(initial, reference, tasks, start,
                            [&](const IterationLog& l, const PolicyParams& theta, std::span<const GroupBatch> groups) {
    log.push_back(stamped(to_json(l), p));
    for (const auto& g : groups) {
      for (std::size_t i = 0; i < g.rollouts.size(); ++i) {
        rollouts.push_back(stamped({{"iteration", l.iteration},
                                    {"task_id", g.task_id},
                                    {"rollout", i},
                                    {"text", g.rollouts[i].rendered_text},
                                    {"reward", *g.rollouts[i].reward},
                                    {"advantage", g.advantages[i]}},
                                   p));
      }
    }
    const int done = l.iteration + 1;
    if (every > 0 && done % every == 0) save_model(out / step_name(done), theta, p, "rl", static_cast<std::uint64_t>(done));
  });
  write_jsonl(log_path, log);
  write_jsonl(rollouts_path, rollouts);
  const int iters = p.grpo_config().max_iterations;
  save_model(out / "rl_final.ckpt", r.params, p, "rl", static_cast<std::uint64_t>(std::max(iters, start)));
  if (!r.log.empty()) {
    std::cout << "rl: iterations " << start << ".." << iters << ", final mean reward " << r.log.back().mean_reward
              << ", kl " << r.log.back().kl << "\n";
  } else {
    std::cout << "rl: nothing to do (start " << start << ", max " << iters << ")\n";
  }
}

void cmd_train(const Common& c, const TrainArgs& a) {
  const Pipeline p = make_pipeline(c);
  if (a.stage == "sft") {
    cmd_train_sft(p, a);
  } else {
    cmd_train_rl(p, a);
  }
}

// -- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string model;
  std::string tasks;
  std::string out = "eval";
  std::string name = "eval";
};

void cmd_eval(const Common& c, const EvalArgs& a) {
  const Pipeline p = make_pipeline(c);
  const PolicyParams model = load_model(a.model);
  const auto tasks = read_tasks(a.tasks);
  const EvalOutcome e = p.evaluate(model, tasks);
  json rep = stamped(to_json(e.report), p);
  rep["model"] = a.model;
  rep["tasks"] = a.tasks;
  rep["iou_threshold"] = p.eval_threshold();
  const fs::path out = a.out;
  write_json(out / (a.name + "_report.json"), rep);
  write_text(out / (a.name + "_per_task.csv"),
             "# config_hash=" + p.hash() + " seed=" + std::to_string(p.root_seed()) + "\n" + per_task_csv(e.acc.per_task));
  std::printf("%s: Acc@%.2f %.4f (macro %.4f) on %d tasks\n", a.name.c_str(), p.eval_threshold(), e.report.overall_accuracy,
              e.report.macro_average, e.report.task_count);
}

// -- report -----------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> reports;
  std::string out;
};

std::string fmt_opt(const json& v) {
  if (v.is_null()) return "     -";
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%6.3f", v.get<double>());
  return buf;
}

void cmd_report(const ReportArgs& a) {
  std::vector<json> reps;
  for (const auto& path : a.reports) {
    json j = read_json(path);
    if (const auto errs = validate_report_json(j); !errs.empty()) throw DataError(path + ": " + errs.front());
    reps.push_back(std::move(j));
  }
  std::printf("%-40s %6s %6s %6s %6s %6s %8s\n", "report", "acc", "macro", "in", "out", "fmt", "d(acc)");
  const double base = reps.front().at("overall_accuracy").get<double>();
  json table = json::array();
  for (std::size_t i = 0; i < reps.size(); ++i) {
    const auto& r = reps[i];
    const double acc = r.at("overall_accuracy").get<double>();
    std::printf("%-40s %6.3f %6.3f %s %s %6.3f %+8.3f\n", a.reports[i].c_str(), acc, r.at("macro_average").get<double>(),
                fmt_opt(r.at("in_domain_average")).c_str(), fmt_opt(r.at("out_of_domain_average")).c_str(),
                r.at("format_rate").get<double>(), acc - base);
    table.push_back({{"report", a.reports[i]},
                     {"overall_accuracy", acc},
                     {"macro_average", r.at("macro_average")},
                     {"in_domain_average", r.at("in_domain_average")},
                     {"out_of_domain_average", r.at("out_of_domain_average")},
                     {"format_rate", r.at("format_rate")},
                     {"delta_vs_first", acc - base},
                     {"provenance", r.value("provenance", json(nullptr))}});
  }
  if (!a.out.empty()) write_json(a.out, {{"reports", table}});
}

// -- run --------------------------------------------------------------------

struct RunArgs {
  std::string out = "run";
  bool no_rs = false;
  bool no_cold_start = false;
};

void cmd_run(const Common& c, const RunArgs& a) {
  const Pipeline p = make_pipeline(c);
  const fs::path out = a.out;
  const FullRun r = run_full_pipeline(p, {!a.no_rs, !a.no_cold_start});
  write_tasks(out / "data" / "train.jsonl", r.splits.train, p);
  write_tasks(out / "data" / "heldout.jsonl", r.splits.heldout, p);
  std::vector<json> log;
  for (const auto& l : r.rl.log) log.push_back(to_json(l));
  write_records(out / "rl_log.jsonl", log, p);
  save_model(out / "base.ckpt", r.base, p, "base", 0);
  std::vector<std::pair<std::string, const PolicyParams*>> stages = {{"base", &r.base}};
  if (!a.no_cold_start) {
    save_model(out / "sft_merged.ckpt", r.sft.merged, p, "sft-merged", r.sft.loss_trace.size());
    stages.emplace_back("stage1", &r.sft.merged);
  }
  save_model(out / "rl_final.ckpt", r.rl.params, p, "rl", r.rl.log.size());
  stages.emplace_back("stage2", &r.rl.params);
  for (const auto& [name, params] : stages) {
    const EvalOutcome e = p.evaluate(*params, r.splits.heldout);
    write_json(out / (name + "_report.json"), stamped(to_json(e.report), p));
    std::printf("%-7s held-out Acc@%.2f %.4f\n", name.c_str(), p.eval_threshold(), e.report.overall_accuracy);
  }
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Two-stage (CoT-SFT + GRPO) multi-image grounding pipeline on a toy policy"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "JSON config file (default: $MIGGRPO_CONFIG)");
    sub->add_option("--set", common.overrides, "override, e.g. grpo.beta_kl=0.1")->take_all();
    sub->add_option("-j,--workers", common.workers, "worker threads (overrides config)")->check(CLI::NonNegativeNumber);
  };

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate the train and held-out task files");
  add_common(gen_cmd);
  gen_cmd->add_option("-o,--out", gen.out, "output directory");

  CurateArgs cur;
  auto* cur_cmd = app.add_subcommand("curate", "consistency-filter teacher CoT (cot) or rejection-sample tasks (rs)");
  add_common(cur_cmd);
  cur_cmd->add_option("--stage", cur.stage)->required()->check(CLI::IsMember({"cot", "rs"}));
  cur_cmd->add_option("--tasks", cur.tasks, "task JSONL")->required();
  cur_cmd->add_option("--teacher", cur.teacher, "existing teacher samples (cot; generated when omitted)");
  cur_cmd->add_option("--model", cur.model, "merged stage-1 checkpoint (rs)");
  cur_cmd->add_option("-o,--out", cur.out, "output directory");

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train", "cold-start SFT (sft) or GRPO (rl)");
  add_common(tr_cmd);
  tr_cmd->add_option("--stage", tr.stage)->required()->check(CLI::IsMember({"sft", "rl"}));
  tr_cmd->add_option("--tasks", tr.tasks, "task JSONL")->required();
  tr_cmd->add_option("--cot", tr.cot, "curated CoT samples (sft)");
  tr_cmd->add_option("--model", tr.model, "starting checkpoint: base for sft, merged stage-1 for rl");
  tr_cmd->add_option("--resume", tr.resume, "rl checkpoint to resume from");
  tr_cmd->add_flag("--allow-cold-rl", tr.allow_cold_rl, "run rl from the base policy when --model is absent");
  tr_cmd->add_option("-o,--out", tr.out, "output directory");

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "greedy Acc@IoU report for a checkpoint");
  add_common(ev_cmd);
  ev_cmd->add_option("--model", ev.model, "checkpoint")->required();
  ev_cmd->add_option("--tasks", ev.tasks, "task JSONL")->required();
  ev_cmd->add_option("-o,--out", ev.out, "output directory");
  ev_cmd->add_option("--name", ev.name, "report file prefix");

  ReportArgs rep;
  auto* rep_cmd = app.add_subcommand("report", "compare evaluation reports");
  rep_cmd->add_option("reports", rep.reports, "report JSON files; deltas are against the first")->required()->check(CLI::ExistingFile);
  rep_cmd->add_option("-o,--out", rep.out, "write the comparison as JSON");

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "all stages end to end");
  add_common(run_cmd);
  run_cmd->add_option("-o,--out", run.out, "output directory");
  run_cmd->add_flag("--no-rs", run.no_rs, "skip rejection sampling");
  run_cmd->add_flag("--no-cold-start", run.no_cold_start, "skip CoT-SFT");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageExit;
  }

  if (*gen_cmd) cmd_gen(common, gen);
  if (*cur_cmd) cmd_curate(common, cur);
  if (*tr_cmd) cmd_train(common, tr);
  if (*ev_cmd) cmd_eval(common, ev);
  if (*rep_cmd) cmd_report(rep);
  if (*run_cmd) cmd_run(common, run);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumericErrorExit;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataErrorExit;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataErrorExit;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid configuration: " << e.what() << "\n";
    return kDataErrorExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataErrorExit;
  }
}
