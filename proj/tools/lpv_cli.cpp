// lpv: stage-oriented command line for the LPV pipeline.
//
// Exit codes: 0 success, 1 other failure, 2 config error, 3 stage-order error,
// 4 numerical abort.

#include "CLI11.hpp"
#include "lpv/pipeline.hpp"

#include <iostream>

namespace {

struct GlobalOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string workdir;
  bool force = false;
  bool quiet = false;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LPV pipeline: synthetic corpus, prosody encoder, LPV predictor, prosody metrics"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  app.add_option("-c,--config", g.config, "JSON config file (defaults apply when omitted)");
  app.add_option("-s,--set", g.overrides, "Override a config field, e.g. --set encoder.hidden=16");
  app.add_option("-w,--workdir", g.workdir, "Workspace root (overrides paths.root)");
  app.add_flag("--force", g.force, "Accept artifacts produced under a different config");
  app.add_flag("-q,--quiet", g.quiet, "Only log warnings and errors");

  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic corpora");
  std::string quality, out_dir, split = "train", name;
  int n = 0;
  gen->add_option("--quality", quality, "Generate a single corpus of this quality (high|low|text_only)");
  gen->add_option("--n", n, "Utterance count for --quality");
  gen->add_option("--out", out_dir, "Output directory for --quality");
  gen->add_option("--split", split, "Split label for --quality");
  gen->add_option("--name", name, "Utterance id prefix for --quality (default: the output directory name)");

  auto* train = app.add_subcommand("train-encoder", "Train the prosody encoder and codebook");

  auto* extract = app.add_subcommand("extract-lpv", "Extract word-level LPVs");
  std::string corpus_arg, extract_out;
  extract->add_option("--corpus", corpus_arg, "Workspace corpus name or manifest path (default: all acoustic corpora)");
  extract->add_option("--out", extract_out, "Output JSONL (with a manifest path)");

  bool allow_skip = false;
  auto* text = app.add_subcommand("pretrain-text", "Masked text pretraining of the context encoder");
  auto* audio = app.add_subcommand("pretrain-audio", "Autoregressive pretraining on low-quality LPVs");
  auto* finetune = app.add_subcommand("finetune", "Autoregressive fine-tuning on high-quality LPVs");
  for (auto* sc : {text, audio, finetune})
    sc->add_flag("--allow-skip", allow_skip, "Run without the checkpoints of earlier declared stages");

  auto* predict = app.add_subcommand("predict", "Predict LPVs from words");
  std::string predict_in = "test", predict_out, mode;
  double temperature = 0.0;
  predict->add_option("--in", predict_in, "Workspace corpus name or manifest path");
  predict->add_option("--out", predict_out, "Output JSONL");
  predict->add_option("--mode", mode, "greedy or sample")->check(CLI::IsMember({"greedy", "sample"}));
  predict->add_option("--temperature", temperature, "Sampling temperature");

  auto* evaluate = app.add_subcommand("evaluate", "Pitch DTW and duration KL between prosody systems");
  std::string system1, system2;
  evaluate->add_option("--system1", system1, "Prosody JSONL of system 1");
  evaluate->add_option("--system2", system2, "Prosody JSONL of system 2");

  auto* ablate = app.add_subcommand("ablate", "Paired baseline/variant runs over several seeds");
  std::vector<std::string> toggles;
  int seeds = 5;
  int value = 0;
  std::string through = "all";
  ablate->add_option("--toggle", toggles, "Factor to ablate (repeatable)")
      ->required()
      ->check(CLI::IsMember(lpv::ablation_toggles()));
  ablate->add_option("--seeds", seeds, "Number of consecutive seeds");
  ablate->add_option("--value", value, "Variant codebook size for codebook_size");
  ablate->add_option("--through", through, "Last stage group to run (encoder|all)")
      ->check(CLI::IsMember({"encoder", "all"}));

  auto* run_all = app.add_subcommand("run-all", "Run every stage in order");
  auto* show = app.add_subcommand("show-config", "Print the resolved config and its hashes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (g.quiet) lpv::log::threshold() = lpv::log::Level::warn;
    std::vector<std::string> overrides = g.overrides;
    if (!g.workdir.empty()) overrides.push_back("paths.root=" + nlohmann::json(g.workdir).dump());
    if (predict->parsed()) {
      if (!mode.empty()) overrides.push_back("predict.mode=" + nlohmann::json(mode).dump());
      if (temperature > 0.0) overrides.push_back("predict.temperature=" + std::to_string(temperature));
    }
    const lpv::PipelineConfig cfg = lpv::load_config(g.config, overrides);
    const lpv::Workspace ws{cfg.paths.root};
    const lpv::RunOptions opt{g.force, allow_skip};

    if (show->parsed()) {
      nlohmann::json out = {{"config", cfg}, {"config_hash", lpv::config_hash(cfg)}};
      for (auto s : {lpv::Stage::corpus, lpv::Stage::encoder, lpv::Stage::text, lpv::Stage::audio, lpv::Stage::finetune,
                     lpv::Stage::predict, lpv::Stage::evaluate})
        out["stage_hashes"][lpv::stage_name(s)] = lpv::stage_hash(cfg, s);
      std::cout << out.dump(2) << '\n';
    } else if (gen->parsed()) {
      if (quality.empty()) {
        lpv::gen_corpus(ws, cfg);
      } else {
        if (n < 1 || out_dir.empty()) lpv::fail<lpv::ConfigError>("gen-corpus --quality needs --n >= 1 and --out");
        const std::string prefix = name.empty() ? lpv::fs::path(out_dir).filename().string() : name;
        const auto m = lpv::generate_named_corpus(cfg, lpv::pipeline_spec(cfg), prefix, lpv::parse_quality(quality), n,
                                                  lpv::parse_split(split), out_dir);
        lpv::log::info("gen-corpus: wrote ", m.utterances.size(), " utterances to ", out_dir);
      }
    } else if (train->parsed()) {
      lpv::train_encoder_stage(ws, cfg, opt);
    } else if (extract->parsed()) {
      const auto& names = lpv::corpus_names();
      if (corpus_arg.empty()) {
        lpv::extract_lpv_stage(ws, cfg, opt);
      } else if (std::find(names.begin(), names.end(), corpus_arg) != names.end() && extract_out.empty()) {
        lpv::extract_lpv_stage(ws, cfg, opt, {corpus_arg});
      } else {
        lpv::fs::path manifest = corpus_arg;
        if (std::find(names.begin(), names.end(), corpus_arg) != names.end()) manifest = ws.manifest(corpus_arg);
        if (lpv::fs::is_directory(manifest)) manifest /= "manifest.jsonl";
        if (extract_out.empty()) lpv::fail<lpv::ConfigError>("extract-lpv: --out is required with a manifest path");
        const auto usage = lpv::extract_lpv_to(ws, cfg, opt, manifest, extract_out);
        lpv::log::info("extract-lpv: perplexity ", usage.perplexity, " active codes ", usage.active_codes);
      }
    } else if (text->parsed()) {
      lpv::predictor_stage(ws, cfg, lpv::StageTag::text_pretrain, opt);
    } else if (audio->parsed()) {
      lpv::predictor_stage(ws, cfg, lpv::StageTag::audio_pretrain, opt);
    } else if (finetune->parsed()) {
      lpv::predictor_stage(ws, cfg, lpv::StageTag::finetune, opt);
    } else if (predict->parsed()) {
      lpv::predict_stage(ws, cfg, opt, predict_in, predict_out);
    } else if (evaluate->parsed()) {
      if (system1.empty() != system2.empty())
        lpv::fail<lpv::ConfigError>("evaluate: give both --system1 and --system2, or neither");
      if (system1.empty())
        lpv::evaluate_stage(ws, cfg, opt);
      else
        lpv::evaluate_files(ws, cfg, opt, system1, system2);
    } else if (ablate->parsed()) {
      std::vector<lpv::AblationSpec> specs;
      for (const auto& t : toggles)
        specs.push_back({t, t == "codebook_size" && value > 0 ? std::optional<int>(value) : std::nullopt});
      lpv::ablate(ws, cfg, opt, specs, seeds, through == "all");
    } else if (run_all->parsed()) {
      lpv::run_all(ws, cfg, opt);
    }
    return 0;
  } catch (const lpv::ConfigError& e) {
    lpv::log::error("config error: ", e.what());
    return 2;
  } catch (const lpv::StageOrderError& e) {
    lpv::log::error("stage order: ", e.what());
    return 3;
  } catch (const lpv::NumericalError& e) {
    lpv::log::error("numerical abort: ", e.what());
    return 4;
  } catch (const std::exception& e) {
    lpv::log::error(e.what());
    return 1;
  }
}
