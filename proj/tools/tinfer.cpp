// tinfer command line: dataset and model generation, pruning, single-stage
// runs, the ablation bench and graph optimization dumps.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "tinfer/bench.hpp"
#include "tinfer/graphopt.hpp"

using namespace tinfer;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out || !(out << text)) throw Error(ErrorKind::Io, "cannot write " + path);
}

ModelConfig config_arg(const std::string& value) {
  if (value == "reference") return ModelConfig::reference();
  return ModelConfig::from_json(read_file(value));
}

void log_line(const std::string& msg) { std::cerr << msg << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale transformer inference engine"};
  app.require_subcommand(1);

  // gen-vocab
  auto* gen_vocab = app.add_subcommand("gen-vocab", "Write a synthetic word vocabulary (TSV)");
  std::size_t vocab_size = 4096;
  std::uint64_t vocab_seed = 42;
  std::string vocab_out;
  gen_vocab->add_option("--size", vocab_size, "Tokens including specials")->capture_default_str();
  gen_vocab->add_option("--seed", vocab_seed)->capture_default_str();
  gen_vocab->add_option("--out", vocab_out)->required();

  // gen-data
  auto* gen_data = app.add_subcommand("gen-data", "Write a synthetic JSONL corpus");
  std::size_t data_n = 500, data_max = 96, hot_words = 1000;
  double data_mean = 60;
  std::uint64_t data_seed = 42;
  std::string data_vocab, data_out;
  gen_data->add_option("--n", data_n)->capture_default_str();
  gen_data->add_option("--seed", data_seed)->capture_default_str();
  gen_data->add_option("--mean", data_mean, "Mean length in tokens")->capture_default_str();
  gen_data->add_option("--max", data_max, "Maximum length in tokens")->capture_default_str();
  gen_data->add_option("--hot-words", hot_words, "Distinct words the corpus draws from")->capture_default_str();
  gen_data->add_option("--vocab", data_vocab, "Vocab TSV (default: synthetic 4096, seed 42)");
  gen_data->add_option("--out", data_out)->required();

  // init-model
  auto* init = app.add_subcommand("init-model", "Write a randomly initialized model");
  std::string init_config = "reference", init_out;
  std::uint64_t init_seed = 42;
  init->add_option("--config", init_config, "Config JSON path or 'reference'")->capture_default_str();
  init->add_option("--seed", init_seed)->capture_default_str();
  init->add_option("--out", init_out)->required();

  // prune
  auto* prune = app.add_subcommand("prune", "Prune vocabulary rows and position rows");
  std::string prune_model, prune_vocab_path, prune_data, prune_out, prune_map_out, prune_vocab_out;
  std::size_t keep_count = 0, positions = 0;
  std::uint64_t min_frequency = 0;
  prune->add_option("--model", prune_model)->required();
  prune->add_option("--vocab", prune_vocab_path)->required();
  prune->add_option("--data", prune_data, "Calibration corpus (JSONL)")->required();
  auto* keep_opt = prune->add_option("--keep-count", keep_count);
  auto* freq_opt = prune->add_option("--min-frequency", min_frequency);
  keep_opt->excludes(freq_opt);
  prune->add_option("--positions", positions, "New position limit (0 keeps all)");
  prune->add_option("--out", prune_out)->required();
  prune->add_option("--map-out", prune_map_out);
  prune->add_option("--vocab-out", prune_vocab_out);

  // run and bench share these
  std::string model_path, vocab_path, data_path, out_path, stage_name = "pipeline", stages_list, format = "table";
  BenchSettings bench;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--model", model_path)->required();
    cmd->add_option("--vocab", vocab_path, "Vocab TSV (default: synthetic 4096, seed 42)");
    cmd->add_option("--data", data_path)->required();
    cmd->add_option("--max-new", bench.max_new_tokens)->capture_default_str();
    cmd->add_option("--keep-count", bench.keep_count)->capture_default_str();
    cmd->add_option("--positions", bench.trimmed_positions)->capture_default_str();
    cmd->add_option("--batch", bench.max_batch_size)->capture_default_str();
    cmd->add_option("--bucket-width", bench.bucket_width)->capture_default_str();
    cmd->add_option("--queue-capacity", bench.queue_capacity)->capture_default_str();
    cmd->add_flag("--fp32-ladder", bench.fp32_ladder, "Keep every stage in F32");
  };

  auto* run = app.add_subcommand("run", "Run one ladder stage and write summaries");
  add_common(run);
  run->add_option("--stage", stage_name)->capture_default_str();
  run->add_option("--out", out_path)->required();

  auto* bench_cmd = app.add_subcommand("bench", "Run the ablation ladder");
  add_common(bench_cmd);
  stages_list = "baseline,fast_transformer,pruning,pipeline";
  bench_cmd->add_option("--stages", stages_list)->capture_default_str();
  bench_cmd->add_option("--format", format)->check(CLI::IsMember({"table", "json"}))->capture_default_str();
  bench_cmd->add_option("--repeats", bench.repeats)->capture_default_str();
  bench_cmd->add_option("--seed", bench.seed, "Seed recorded in the fingerprint")->capture_default_str();
  bench_cmd->add_option("--out", out_path, "Also write the report here");
  bool quiet = false;
  bench_cmd->add_flag("--quiet", quiet, "No progress on stderr");
  std::string fault_stage;
  bench_cmd->add_option("--inject-fault", fault_stage, "Corrupt one output of this stage (tests the correctness gate)");

  // graph-opt
  auto* graph = app.add_subcommand("graph-opt", "Fuse and plan one transformer block graph");
  std::string graph_config = "reference", graph_out;
  std::size_t seq_len = 128;
  bool no_fuse = false;
  graph->add_option("--config", graph_config)->capture_default_str();
  graph->add_option("--seq-len", seq_len)->capture_default_str();
  graph->add_flag("--no-fuse", no_fuse);
  graph->add_option("--out", graph_out, "Write the graph JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    auto load_vocab_or_default = [](const std::string& path) {
      return path.empty() ? synthetic_vocab(4096, 42) : load_vocab(path);
    };

    if (*gen_vocab) {
      save_vocab(synthetic_vocab(vocab_size, vocab_seed), vocab_out);
    } else if (*gen_data) {
      const Vocab vocab = load_vocab_or_default(data_vocab);
      const auto texts = gen_dataset(vocab, data_n, data_seed, LengthDistribution{data_mean, data_max}, hot_words);
      std::ofstream out(data_out);
      if (!out) throw Error(ErrorKind::Io, "cannot write " + data_out);
      write_contents(out, texts);
    } else if (*init) {
      save_model(init_random(config_arg(init_config), init_seed), init_out);
    } else if (*prune) {
      const Model model = load_model(prune_model);
      const Vocab vocab = load_vocab(prune_vocab_path);
      const Tokenizer tokenizer(vocab);
      const auto counts = scan_frequencies(load_contents(prune_data), tokenizer);
      const auto& sp = vocab.specials();
      const TokenId specials[] = {sp.unk, sp.eos, sp.pad};
      if (freq_opt->count() == 0 && keep_opt->count() == 0) {
        throw Error(ErrorKind::Parameter, "one of --keep-count or --min-frequency is required");
      }
      const PrunedVocabMap map = keep_opt->count() ? build_pruned_vocab(counts, keep_count, specials)
                                                   : build_pruned_vocab_by_frequency(counts, min_frequency, specials);
      Model pruned = prune_token_embedding(model, map);
      if (positions > 0) pruned = prune_position_embedding(pruned, positions);
      save_model(pruned, prune_out);
      if (!prune_map_out.empty()) save_vocab_map(map, prune_map_out);
      if (!prune_vocab_out.empty()) save_vocab(tinfer::prune_vocab(vocab, map), prune_vocab_out);
      std::cout << "kept " << map.size() << " of " << map.old_vocab_size << " tokens\n";
    } else if (*run) {
      const Model model = load_model(model_path);
      const Vocab vocab = load_vocab_or_default(vocab_path);
      const auto texts = load_contents(data_path);
      const StageSetup setup(parse_stage(stage_name), model, vocab, texts, bench);
      const auto result = setup.run(texts);
      save_results(out_path, result.items);
      std::cout << result.items.size() << " samples in " << result.stats.wall_seconds << " s\n";
    } else if (*bench_cmd) {
      const Model model = load_model(model_path);
      const Vocab vocab = load_vocab_or_default(vocab_path);
      const auto texts = load_contents(data_path);
      if (!quiet) bench.log = log_line;
      if (!fault_stage.empty()) {
        const Stage target = parse_stage(fault_stage);
        bench.corrupt_outputs = [target](Stage stage, std::vector<WorkItem>& items) {
          if (stage == target && !items.empty()) items.front().generated_ids->push_back(0);
        };
      }
      const auto reports = run_ablation(texts, model, vocab, parse_stages(stages_list), bench);
      const auto text = emit_report(reports, parse_report_format(format));
      std::cout << text;
      if (!out_path.empty()) write_file(out_path, text);
    } else if (*graph) {
      const OpGraph block = transformer_block_graph(config_arg(graph_config), seq_len);
      const OpGraph g = no_fuse ? block : fuse_all(block);
      const ArenaPlan plan = plan_memory(g, analyze_lifetimes(g));
      std::cout << "nodes " << block.node_count() << " -> " << g.node_count() << "\n"
                << "buffers " << plan.buffer_count() << "\n"
                << "peak_arena_bytes " << plan.peak_bytes() << "\n"
                << "unplanned_bytes " << total_intermediate_bytes(g) << "\n";
      if (!graph_out.empty()) write_file(graph_out, g.to_json());
    }
  } catch (const Error& e) {
    std::cerr << "tinfer: " << e.what() << '\n';
    return e.kind() == ErrorKind::Correctness ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "tinfer: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
