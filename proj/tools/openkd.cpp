#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "openkd/harness.hpp"
#include "openkd/synthetic.hpp"

using namespace openkd;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string llm_mode, llm_cache, transcripts;
  bool verbose = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "JSON run configuration");
  app->add_option("--set", c.sets, "override a config value, e.g. --set train.episodes=200");
  app->add_option("--seed", c.seed, "random seed");
  app->add_option("--llm-mode", c.llm_mode, "live, record, replay or mock")
      ->check(CLI::IsMember({"live", "record", "replay", "mock"}));
  app->add_option("--llm-cache", c.llm_cache, "transcript cache file for record/replay");
  app->add_option("--transcripts", c.transcripts, "mock transcript table");
  app->add_flag("-v,--verbose", c.verbose, "debug logging");
}

struct Loaded {
  harness::RunConfig cfg;
  fs::path base;  // relative paths in the config resolve against this
};

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

json override_patch(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigurationError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t dot; (dot = rest.find('.')) != std::string::npos; rest = rest.substr(dot + 1)) parts.push_back(rest.substr(0, dot));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  return patch;
}

Loaded load(const Common& c) {
  if (c.verbose) spdlog::set_level(spdlog::level::debug);
  Loaded l;
  if (!c.config.empty()) {
    l.cfg = harness::load_config(c.config);
    l.base = fs::path(c.config).parent_path();
  }
  for (const auto& s : c.sets) l.cfg = harness::config_from_json(override_patch(s), l.cfg);
  if (c.seed) l.cfg.seed = *c.seed;
  if (!c.llm_mode.empty()) l.cfg.llm.mode = c.llm_mode;
  if (!c.llm_cache.empty()) l.cfg.llm.cache = fs::absolute(c.llm_cache).string();
  if (!c.transcripts.empty()) l.cfg.llm.transcripts = fs::absolute(c.transcripts).string();
  l.cfg.validate();
  return l;
}

corpus::Dataset load_data(const Loaded& l, const std::string& flag) {
  const fs::path p = flag.empty() ? resolve(l.base, l.cfg.data.manifest) : fs::path(flag);
  if (p.empty()) throw ConfigurationError("no dataset: pass --data or set data.manifest");
  return corpus::load_dataset(p);
}

corpus::DatasetSplit split_of(const Loaded& l, const corpus::Dataset& ds) {
  const auto& d = l.cfg.data;
  if (d.train_species.empty() && d.val_species.empty() && d.test_species.empty()) return {ds, {}, ds};
  return corpus::split_dataset(ds, {d.train_species, d.val_species, d.test_species});
}

std::unique_ptr<llm::Gateway> gateway(const Loaded& l) { return harness::make_gateway(l.cfg.llm, l.base); }

fs::path or_config(const std::string& flag, const Loaded& l, const std::string& from_config, const char* what) {
  const fs::path p = flag.empty() ? resolve(l.base, from_config) : fs::path(flag);
  if (p.empty()) throw ConfigurationError(std::string("no ") + what + " given");
  return p;
}

std::unique_ptr<harness::OpenKDModel> load_model(const std::string& checkpoint) {
  const auto ck = harness::read_checkpoint(checkpoint);
  auto model = std::make_unique<harness::OpenKDModel>(harness::checkpoint_model_config(ck));
  harness::load_checkpoint(ck, *model);
  return model;
}

std::vector<std::string> species_names(const corpus::Dataset& ds, const std::vector<std::string>& extra) {
  auto out = ds.species();
  out.insert(out.end(), extra.begin(), extra.end());
  return out;
}

void write_lines(const std::string& path, const std::vector<json>& rows) {
  if (path.empty()) {
    for (const auto& r : rows) std::cout << r.dump() << "\n";
    return;
  }
  std::ofstream out(path);
  if (!out) throw ConfigurationError("cannot write " + path);
  for (const auto& r : rows) out << r.dump() << "\n";
}

Image overlay(const Image& query, const Tensor& heat) {
  Image out(query.width, query.height, 3);
  double lo = heat[0], hi = heat[0];
  for (std::size_t i = 0; i < heat.size(); ++i) lo = std::min(lo, heat[i]), hi = std::max(hi, heat[i]);
  const int rows = heat.dim(0), cols = heat.dim(1);
  for (int y = 0; y < query.height; ++y)
    for (int x = 0; x < query.width; ++x) {
      const double v = hi > lo ? (heat.at(y * rows / query.height, x * cols / query.width) - lo) / (hi - lo) : 0.0;
      for (int ch = 0; ch < 3; ++ch) {
        const float base = query.at(x, y, query.channels == 3 ? ch : 0) * 0.5f;
        out.at(x, y, ch) = base + static_cast<float>(ch == 0 ? 0.5 * v : 0.0);
      }
    }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-vocabulary keypoint detection toolkit"};
  app.require_subcommand(1);
  Common common;

  auto* ingest = app.add_subcommand("ingest", "validate a dataset manifest and report its contents");
  std::string ingest_manifest, ingest_out;
  bool ingest_load = false;
  ingest->add_option("manifest", ingest_manifest, "manifest JSON")->required();
  ingest->add_option("--out", ingest_out, "write the normalised manifest here");
  ingest->add_flag("--load-images", ingest_load, "decode every referenced image and mask");
  add_common(ingest, common);

  auto* bench = app.add_subcommand("make-benchmark", "render the synthetic shapes benchmark");
  std::string bench_out;
  synthetic::SynthConfig synth;
  bench->add_option("--out", bench_out, "output directory")->required();
  bench->add_option("--per-species", synth.per_species, "instances per species");
  bench->add_option("--size", synth.size, "image side in pixels");
  bench->add_option("--occlusion", synth.occlusion, "per-keypoint hide probability");
  bench->add_option("--bench-seed", synth.seed, "generator seed");
  add_common(bench, common);

  auto* train = app.add_subcommand("train", "episodic training");
  std::string train_data, train_out, train_log, train_audit;
  std::optional<long> train_episodes;
  train->add_option("--data", train_data, "dataset manifest (overrides data.manifest)");
  train->add_option("--out", train_out, "checkpoint path")->required();
  train->add_option("--log", train_log, "JSON-lines training log");
  train->add_option("--audit", train_audit, "JSON-lines auxiliary pair audit log");
  train->add_option("--episodes", train_episodes, "training steps (overrides train.episodes)");
  add_common(train, common);

  auto* eval = app.add_subcommand("eval", "PCK evaluation of a checkpoint");
  std::string eval_ckpt, eval_data, eval_mode, eval_split;
  std::optional<long> eval_episodes;
  std::optional<int> eval_shots;
  std::optional<double> eval_rho;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset manifest (overrides data.manifest)");
  eval->add_option("--mode", eval_mode, "zero_shot, k_shot or k_shot_with_text");
  eval->add_option("--split", eval_split, "base, novel or all");
  eval->add_option("--episodes", eval_episodes, "number of test episodes");
  eval->add_option("--shots", eval_shots, "supports per episode in k-shot modes");
  eval->add_option("--rho", eval_rho, "PCK threshold fraction");
  add_common(eval, common);

  auto* itpl = app.add_subcommand("interpolate-texts", "query the LLM for interpolated keypoint names");
  std::string itpl_paths, itpl_data;
  std::optional<int> itpl_reps;
  bool itpl_plain = false;
  itpl->add_option("--paths", itpl_paths, "interpolation path file (overrides data.paths)");
  itpl->add_option("--data", itpl_data, "manifest whose schema names the path endpoints");
  itpl->add_option("--repetitions", itpl_reps, "queries per path (overrides ftc.R)");
  itpl->add_flag("--plain", itpl_plain, "ask without the chain-of-thought example");
  add_common(itpl, common);

  auto* synthp = app.add_subcommand("synth-prompts", "synthesize a diverse prompt set");
  std::string sp_data, sp_templates, sp_out, sp_split = "all";
  int sp_max = 3;
  synthp->add_option("--data", sp_data, "dataset manifest");
  synthp->add_option("--templates", sp_templates, "template bank (overrides data.templates)");
  synthp->add_option("--max-keypoints", sp_max, "keypoints per prompt, at most");
  synthp->add_option("--split", sp_split, "base, novel or all");
  synthp->add_option("--out", sp_out, "JSON-lines output (stdout when omitted)");
  add_common(synthp, common);

  std::string parser_kind = "fallback", pr_templates, pr_synonyms, pr_dataset = "synthetic", pr_data;
  std::vector<std::string> pr_species;
  auto add_parser_opts = [&](CLI::App* a) {
    a->add_option("--parser", parser_kind, "llm or fallback")->check(CLI::IsMember({"llm", "fallback"}));
    a->add_option("--templates", pr_templates, "template bank (overrides data.templates)");
    a->add_option("--synonyms", pr_synonyms, "synonym table (overrides data.synonyms)");
    a->add_option("--synonym-set", pr_dataset, "entry of the synonym table to use");
    a->add_option("--data", pr_data, "manifest supplying the schema and species names");
    a->add_option("--species", pr_species, "extra object names the fallback parser accepts");
  };

  auto* parse = app.add_subcommand("parse", "parse diverse prompts into object and keypoints");
  std::vector<std::string> parse_texts;
  std::string parse_prompts, parse_out;
  parse->add_option("--text", parse_texts, "prompt text (repeatable)");
  parse->add_option("--prompts", parse_prompts, "JSON-lines prompt set");
  parse->add_option("--out", parse_out, "JSON-lines output (stdout when omitted)");
  add_parser_opts(parse);
  add_common(parse, common);

  auto* score = app.add_subcommand("score-parsing", "parsing accuracy against a prompt set");
  std::string score_prompts;
  score->add_option("--prompts", score_prompts, "JSON-lines prompt set")->required();
  add_parser_opts(score);
  add_common(score, common);

  auto* plot = app.add_subcommand("plot-heatmaps", "export fused heatmaps as PFM grids and PPM overlays");
  std::string plot_ckpt, plot_data, plot_out, plot_mode = "k_shot_with_text", plot_split = "all";
  long plot_episodes = 4;
  plot->add_option("--checkpoint", plot_ckpt, "checkpoint file")->required();
  plot->add_option("--data", plot_data, "dataset manifest");
  plot->add_option("--out", plot_out, "output directory")->required();
  plot->add_option("--mode", plot_mode, "zero_shot, k_shot or k_shot_with_text");
  plot->add_option("--split", plot_split, "base, novel or all");
  plot->add_option("--episodes", plot_episodes, "episodes to render");
  add_common(plot, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const Loaded l = load(common);

    if (*ingest) {
      const auto ds = corpus::load_dataset(ingest_manifest);
      if (ingest_load)
        for (const auto& in : ds.instances()) {
          ds.store().image(in.image_ref);
          if (in.mask_ref) ds.store().mask(*in.mask_ref);
        }
      json species = json::object();
      for (const auto& [s, idx] : ds.species_index()) species[s] = idx.size();
      std::cout << json{{"instances", ds.size()}, {"keypoints", ds.schema().names}, {"species", species}}.dump(1) << "\n";
      if (!ingest_out.empty()) corpus::save_dataset(ingest_out, ds);
    } else if (*bench) {
      const auto ds = synthetic::generate(synth);
      synthetic::write(ds, bench_out);
      spdlog::info("wrote {} instances to {}", ds.size(), bench_out);
    } else if (*train) {
      auto cfg = l.cfg;
      if (train_episodes) cfg.train.episodes = *train_episodes;
      const auto ds = load_data(l, train_data);
      const auto split = split_of(l, ds);
      std::vector<auxgen::InterpolationPath> paths;
      if ((cfg.flags.use_aux_kp || cfg.flags.use_aux_text) && !cfg.data.paths.empty())
        paths = auxgen::load_paths(resolve(l.base, cfg.data.paths), ds.schema());
      std::unique_ptr<llm::Gateway> gw;
      if (!paths.empty() && cfg.flags.use_aux_text) gw = gateway(l);
      auto pools = harness::collect_pools(paths, cfg, gw.get());
      harness::OpenKDModel model(cfg.model);
      std::unique_ptr<auxgen::AuditLog> audit;
      if (!train_audit.empty()) audit = std::make_unique<auxgen::AuditLog>(train_audit);
      harness::Trainer trainer(model, cfg, split.train, paths, pools);
      harness::TrainHooks hooks;
      hooks.log_path = train_log;
      hooks.checkpoint_path = train_out;
      hooks.audit = audit.get();
      const auto r = trainer.run(hooks);
      std::cout << json{{"steps", r.steps}, {"final_loss", r.losses.empty() ? 0.0 : r.losses.back()},
                        {"checkpoint", train_out}}.dump() << "\n";
    } else if (*eval) {
      auto e = l.cfg.eval;
      if (!eval_mode.empty()) e.mode = eval_mode;
      if (!eval_split.empty()) e.split = eval_split;
      if (eval_episodes) e.episodes = *eval_episodes;
      if (eval_shots) e.shots = *eval_shots;
      if (eval_rho) e.rho = *eval_rho;
      const auto model = load_model(eval_ckpt);
      const auto ds = load_data(l, eval_data);
      const auto split = split_of(l, ds);
      harness::EvalOptions o;
      o.mode = harness::parse_eval_mode(e.mode);
      o.split = e.split;
      o.episodes = e.episodes;
      o.shots = e.shots;
      o.seed = l.cfg.seed;
      o.pck.rho = e.rho;
      const auto r = harness::evaluate(*model, split.test, o);
      std::cout << json{{"pck", r.pck}, {"correct", r.correct}, {"total", r.total}, {"episodes", r.episodes},
                        {"mode", e.mode}, {"split", e.split}, {"seed", l.cfg.seed}}.dump() << "\n";
    } else if (*itpl) {
      const auto schema = itpl_data.empty() ? synthetic::default_schema() : corpus::load_dataset(itpl_data).schema();
      const auto paths = auxgen::load_paths(or_config(itpl_paths, l, l.cfg.data.paths, "interpolation paths"), schema);
      auto gw = gateway(l);
      const int R = itpl_reps.value_or(l.cfg.ftc.R);
      for (const auto& p : paths) {
        const auto pool = auxgen::collect_pool(p, R, *gw, !itpl_plain, l.cfg.llm.model, l.cfg.llm.temperature);
        json cands = json::array();
        for (const auto& c : pool.candidates) cands.push_back({{"text", c.text}, {"repetition", c.repetition}, {"rank", c.rank}});
        std::cout << json{{"from", p.t1}, {"to", p.t2}, {"z", p.z}, {"candidates", cands},
                          {"failed_repetitions", pool.failed_repetitions}}.dump() << "\n";
      }
    } else if (*synthp) {
      const auto ds = load_data(l, sp_data);
      const auto bank = diverse::TemplateBank::load(or_config(sp_templates, l, l.cfg.data.templates, "template bank"));
      std::mt19937_64 rng(l.cfg.seed);
      const auto ps = diverse::synthesize_prompt_set(ds, bank, sp_max, rng, harness::split_ids(ds.schema(), sp_split));
      std::vector<json> rows;
      for (const auto& p : ps) rows.push_back(diverse::to_json(p));
      write_lines(sp_out, rows);
    } else if (*parse || *score) {
      const auto ds = pr_data.empty() ? std::optional<corpus::Dataset>() : std::optional(corpus::load_dataset(pr_data));
      const auto schema = ds ? ds->schema() : synthetic::default_schema();
      std::vector<std::string> species = pr_species;
      if (ds) species = species_names(*ds, pr_species);
      else
        for (const auto& s : synthetic::default_species()) species.push_back(s.name);
      const auto syn_path = pr_synonyms.empty() ? resolve(l.base, l.cfg.data.synonyms) : fs::path(pr_synonyms);
      const auto syn = syn_path.empty() ? diverse::SynonymTable(schema) : diverse::load_synonyms(syn_path, pr_dataset, schema);
      std::unique_ptr<llm::Gateway> gw;
      diverse::Parser parser;
      if (parser_kind == "llm") {
        gw = gateway(l);
        parser = [&](const std::string& t) { return diverse::llm_parse(t, *gw, syn, l.cfg.llm.model); };
      } else {
        const auto bank = diverse::TemplateBank::load(or_config(pr_templates, l, l.cfg.data.templates, "template bank"));
        parser = diverse::FallbackParser(bank, syn, species);
      }
      if (*parse) {
        std::vector<std::string> texts = parse_texts;
        if (!parse_prompts.empty())
          for (const auto& p : diverse::load_prompts(parse_prompts)) texts.push_back(p.text);
        if (texts.empty()) throw ConfigurationError("parse needs --text or --prompts");
        std::vector<json> rows;
        for (const auto& t : texts) {
          const auto r = parser(t);
          rows.push_back({{"text", t},
                          {"ok", r.ok},
                          {"object", r.object ? json(*r.object) : json(nullptr)},
                          {"keypoints", r.keypoints}});
        }
        write_lines(parse_out, rows);
      } else {
        const auto ps = diverse::load_prompts(score_prompts);
        std::vector<diverse::ParsedPrompt> preds, gts;
        long failures = 0;
        for (const auto& p : ps) {
          preds.push_back(parser(p.text));
          failures += !preds.back().ok;
          gts.push_back({p.gt_object, p.gt_keypoints, true, ""});
        }
        const auto acc = diverse::parsing_accuracy(preds, gts);
        std::cout << json{{"prompts", ps.size()}, {"acc_kp", acc.acc_kp}, {"acc_obj", acc.acc_obj},
                          {"parse_failures", failures}}.dump() << "\n";
      }
    } else if (*plot) {
      const auto model = load_model(plot_ckpt);
      const auto ds = load_data(l, plot_data);
      const auto split = split_of(l, ds);
      const auto mode = harness::parse_eval_mode(plot_mode);
      corpus::SamplerOptions so;
      so.shots = mode == harness::EvalMode::zero_shot ? 0 : l.cfg.eval.shots;
      so.max_keypoints = 0;
      so.allowed_ids = harness::split_ids(ds.schema(), plot_split);
      std::mt19937_64 rng(l.cfg.seed);
      fs::create_directories(plot_out);
      for (long e = 0; e < plot_episodes; ++e) {
        const auto ep = corpus::sample_episode(split.test, so, rng);
        const auto maps = model->heatmaps(ep, split.test.store(), mode);
        const auto query = split.test.store().image(ep.query.image_ref);
        for (std::size_t k = 0; k < maps.size(); ++k) {
          const std::string stem = "ep" + std::to_string(e) + "_" + std::to_string(ep.keypoint_ids[k]);
          pnm::write_pfm(fs::path(plot_out) / (stem + ".pfm"), maps[k]);
          pnm::write(fs::path(plot_out) / (stem + ".ppm"), overlay(*query, maps[k]));
        }
      }
      spdlog::info("wrote heatmaps for {} episodes to {}", plot_episodes, plot_out);
    }
  } catch (const harness::UnknownConfigKey& e) {
    std::cerr << "error: unknown config key '" << e.key() << "'\n";
    return 2;
  } catch (const ConfigurationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
