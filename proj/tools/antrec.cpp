// antrec command-line front end.
//
// Exit codes: 0 ok, 1 internal, 2 configuration or usage, 3 data, 4 numeric.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "antrec/antrec.hpp"

namespace fs = std::filesystem;
using namespace antrec;

namespace {

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::config:
      return 2;
    case ErrorKind::numeric:
      return 4;
    default:
      return 3;
  }
}

void report_error(const std::string& kind, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  std::cerr << j.dump() << "\n";
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) { bin::write_text(path, j.dump(2) + "\n"); }

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  EngineConfig resolve() const {
    EngineConfig c = config_path.empty() ? EngineConfig{} : load_config(config_path);
    for (const auto& o : overrides) c = apply_override(c, o);
    if (seed) c = apply_override(c, "seed=" + std::to_string(*seed));
    return c;
  }
};

void provenance(const std::string& command, const EngineConfig& c) {
  std::cout << "antrec " << ANTREC_VERSION << " command=" << command << " config=" << to_hex(config_hash(c))
            << " seed=" << c.train.seed << "\n";
}

std::vector<TaskDataset> load_tasks(const std::vector<std::string>& dirs, const LoadOptions& opt) {
  std::vector<TaskDataset> out;
  for (const auto& d : dirs) out.push_back(load_task_dataset(d, opt));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transferable multi-modal sequential recommender"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_help_all_flag("--help-all", "Print help for every subcommand and exit");
  Globals g;
  app.add_option("--config", g.config_path, "Engine configuration JSON")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Override a config key: key=value (synth.* for generator keys)");
  app.add_option("--seed", g.seed, "Override the run seed");

  std::string out, data_dir, task, pretrained, checkpoint, target, split = "test", mode, variant = "base";
  std::string report_a, report_b, metric = "recall";
  std::vector<std::string> tasks, aux, modalities;
  std::vector<std::size_t> ks;
  std::size_t compare_k = 10;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic task suite");
  synth->add_option("--out-dir", out, "Directory to write task_<k>/ folders into")->required();

  auto* pre = app.add_subcommand("pretrain", "Pre-train on auxiliary tasks");
  pre->add_option("--data-dir", data_dir, "Directory of task folders; auxiliary-role tasks are used");
  pre->add_option("--task", tasks, "Explicit task folders (repeatable); overrides --data-dir role selection");
  pre->add_option("--out", out, "Checkpoint path")->required();

  auto* adapt_cmd = app.add_subcommand("adapt", "Adapt to a target task or train from scratch");
  adapt_cmd->add_option("--mode", mode, "relearn | finetune | scratch")->required();
  adapt_cmd->add_option("--variant", variant, "base | with_interaction_emb");
  adapt_cmd->add_option("--pretrained", pretrained, "Pre-trained checkpoint (relearn and finetune)");
  adapt_cmd->add_option("--task", task, "Target task folder")->required();
  adapt_cmd->add_option("--out", out, "Checkpoint path")->required();

  auto* eval_cmd = app.add_subcommand("eval", "Leave-one-out ranking metrics");
  eval_cmd->add_option("--checkpoint", checkpoint, "Adapted or scratch checkpoint")->required();
  eval_cmd->add_option("--task", task, "Target task folder")->required();
  eval_cmd->add_option("--split", split, "validation | test");
  eval_cmd->add_option("--k", ks, "Cutoffs (repeatable); defaults to the config's k_values");
  eval_cmd->add_option("--out", out, "Metrics report path")->required();

  auto* compare = app.add_subcommand("compare", "Paired t-test between two metrics reports");
  compare->add_option("--a", report_a, "First report")->required();
  compare->add_option("--b", report_b, "Second report")->required();
  compare->add_option("--metric", metric, "recall | ndcg");
  compare->add_option("--k", compare_k, "Cutoff");
  compare->add_option("--out", out, "Optional JSON result path");

  auto* probe = app.add_subcommand("probe", "Cross-task separability of transformed modality embeddings");
  probe->add_option("--checkpoint", checkpoint, "Pre-trained checkpoint")->required();
  probe->add_option("--target", target, "Target task folder")->required();
  probe->add_option("--aux", aux, "Auxiliary task folders (repeatable)")->required();
  probe->add_option("--modality", modalities, "text | image | price (repeatable); all enabled by default");
  probe->add_option("--out", out, "Probe report path")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient");
  gradcheck->add_option("--out", out, "Optional JSON report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what());
    return 2;
  }

  try {
    const EngineConfig cfg = g.resolve();
    const auto* sub = app.get_subcommands().front();
    provenance(sub->get_name(), cfg);

    if (sub == synth) {
      const auto dirs = generate_synthetic_suite(cfg.synth, out);
      for (const auto& d : dirs) std::cout << "wrote " << d.string() << "\n";
    } else if (sub == pre) {
      std::vector<TaskDataset> data;
      if (!tasks.empty()) {
        data = load_tasks(tasks, cfg.load_options());
      } else {
        if (data_dir.empty()) throw ConfigError("pretrain needs --data-dir or --task");
        std::vector<fs::path> dirs;
        for (const auto& e : fs::directory_iterator(data_dir))
          if (e.is_directory()) dirs.push_back(e.path());
        std::sort(dirs.begin(), dirs.end());
        for (const auto& d : dirs) {
          auto ds = load_task_dataset(d, cfg.load_options());
          if (ds.role == TaskRole::auxiliary) data.push_back(std::move(ds));
        }
        if (data.empty()) throw ValidationError("no auxiliary tasks under " + data_dir);
      }
      std::vector<const TaskDataset*> ptrs;
      for (const auto& d : data) ptrs.push_back(&d);
      const auto r = pretrain(ptrs, cfg.train, cfg.irl, cfg.intent);
      write_checkpoint(out, r.checkpoint);
      std::cout << "pretrained on " << data.size() << " tasks";
      if (!r.epoch_losses.empty()) std::cout << ", final loss " << r.epoch_losses.back();
      std::cout << "\n";
    } else if (sub == adapt_cmd) {
      const AdaptSpec spec = cfg.adapt_spec(parse_adapt_mode(mode), parse_variant(variant));
      std::optional<Checkpoint> ck;
      if (!pretrained.empty()) ck = read_checkpoint(pretrained);
      const auto target_ds = load_task_dataset(task, cfg.load_options());
      const auto r = adapt(ck ? &*ck : nullptr, target_ds, spec);
      write_checkpoint(out, r.checkpoint);
      std::cout << "adapted " << target_ds.task_id << " (" << mode << "), best epoch " << r.best_epoch << "\n";
    } else if (sub == eval_cmd) {
      const auto ck = read_checkpoint(checkpoint);
      const auto target_ds = load_task_dataset(task, cfg.load_options());
      EvalOptions opt;
      opt.include_validation = cfg.include_validation;
      const auto report = evaluate(ck, target_ds, parse_split(split), ks.empty() ? cfg.k_values : ks, opt);
      write_json(out, to_json(report));
      for (auto k : report.k_values)
        std::cout << "Recall@" << k << " " << report.aggregate("recall", k) << "  NDCG@" << k << " "
                  << report.aggregate("ndcg", k) << "\n";
    } else if (sub == compare) {
      auto read_report = [](const std::string& p) {
        try {
          return report_from_json(nlohmann::ordered_json::parse(bin::read_text(p)));
        } catch (const nlohmann::json::parse_error& e) {
          throw FormatError(p + ": " + e.what());
        }
      };
      const auto r = paired_t_test(read_report(report_a), read_report(report_b), metric, compare_k);
      std::cout << "t=" << r.t << " p=" << r.p << " df=" << r.df << " mean_diff=" << r.mean_diff << "\n";
      if (!out.empty()) {
        nlohmann::ordered_json j;
        j["metric"] = metric;
        j["k"] = compare_k;
        j["t"] = std::isfinite(r.t) ? nlohmann::ordered_json(r.t) : nlohmann::ordered_json(r.t > 0 ? "inf" : "-inf");
        j["p"] = r.p;
        j["df"] = r.df;
        j["mean_diff"] = r.mean_diff;
        write_json(out, j);
      }
    } else if (sub == probe) {
      const auto ck = read_checkpoint(checkpoint);
      const auto target_ds = load_task_dataset(target, cfg.load_options());
      const auto aux_ds = load_tasks(aux, cfg.load_options());
      std::vector<Modality> ms;
      for (const auto& m : modalities) ms.push_back(parse_modality(m));
      const auto opt = cfg.probe_options();
      nlohmann::ordered_json j;
      j["version"] = 1;
      j["results"] = nlohmann::ordered_json::array();
      for (const auto& a : aux_ds) {
        for (Modality m : ms.empty() ? all_modalities() : ms) {
          if (ms.empty() && ((m == Modality::text && ck.config.irl.zero_text) ||
                             (m == Modality::image && ck.config.irl.zero_image) ||
                             (m == Modality::price && ck.config.irl.zero_price)))
            continue;
          const auto r = train_linear_probe(build_probe_dataset(target_ds, a, m, ck, opt), opt);
          std::cout << r.target_id << " vs " << r.aux_id << " " << to_string(m) << " test accuracy " << r.test_accuracy
                    << "\n";
          j["results"].push_back(to_json(r));
        }
      }
      write_json(out, j);
    } else if (sub == gradcheck) {
      GradCheckOptions gopt;
      gopt.seed = cfg.train.seed;
      const auto report = gradient_check(gradcheck_model(), gradcheck_task(cfg.train.seed), cfg.train, gopt);
      nlohmann::ordered_json j;
      j["tolerance"] = cfg.train.gradcheck_tolerance;
      j["worst"] = report.worst;
      j["worst_tensor"] = report.worst_tensor;
      j["max_rel_error"] = report.max_rel_error;
      for (const auto& [name, e] : report.max_rel_error) std::cout << name << " " << e << "\n";
      std::cout << "worst " << report.worst << " (" << report.worst_tensor << ")\n";
      if (!out.empty()) write_json(out, j);
      if (!(report.worst < cfg.train.gradcheck_tolerance)) {
        report_error("numeric", "gradient check exceeded tolerance on " + report.worst_tensor);
        return 4;
      }
    }
  } catch (const Error& e) {
    report_error(to_string(e.kind()), e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return 1;
  }
  return 0;
}
