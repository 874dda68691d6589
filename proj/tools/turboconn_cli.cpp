#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "turbo/analysis.hpp"
#include "turbo/checkpoint.hpp"
#include "turbo/evalkit.hpp"
#include "turbo/tasks.hpp"
#include "turbo/trainer.hpp"

namespace {

using namespace turbo;

// exit codes: 1 usage, 2 io, 3 validation, 4 numeric failure
constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitValidation = 3;
constexpr int kExitNumeric = 4;

std::string with_thousands(std::int64_t v) {
  std::string raw = std::to_string(v);
  std::string out;
  int c = 0;
  for (auto it = raw.rbegin(); it != raw.rend(); ++it) {
    if (c && c % 3 == 0 && *it != '-') out.push_back(',');
    out.push_back(*it);
    ++c;
  }
  std::reverse(out.begin(), out.end());
  return out;
}

std::vector<Connection> resolve_connections(const std::string& arg) {
  if (arg.empty()) return {};
  if (arg == "llama1b-15" || arg == "llama8b-45" || arg == "qwen17b-21")
    return ConnectionSpec::preset(arg, 1.0f, 1, 1).connections;
  return ConnectionSpec::load_table_file(arg);
}

std::vector<int> parse_lens(const std::string& arg) {
  std::vector<int> lens;
  const auto dots = arg.find("..");
  if (dots != std::string::npos) {
    const int lo = std::stoi(arg.substr(0, dots));
    const int hi = std::stoi(arg.substr(dots + 2));
    if (lo < 1 || hi < lo) throw ParamError("--lens: bad range '" + arg + "'");
    for (int v = lo; v <= hi; ++v) lens.push_back(v);
    return lens;
  }
  std::stringstream ss(arg);
  std::string piece;
  while (std::getline(ss, piece, ',')) lens.push_back(std::stoi(piece));
  if (lens.empty()) throw ParamError("--lens: no lengths given");
  return lens;
}

std::string default_data_dir() {
  const char* env = std::getenv("TURBOCONN_DATA_DIR");
  return env ? std::string(env) : std::string();
}

int cmd_gen_data(const std::string& task, int n, int min_len, int max_len, std::uint64_t seed,
                 const std::string& out) {
  tasks::Vocab vocab;
  std::vector<tasks::Sample> samples;
  if (task == "parity")
    samples = tasks::gen_parity(vocab, seed, n, min_len, max_len);
  else if (task == "arith")
    samples = tasks::gen_arith(vocab, seed, n, min_len, max_len);
  else
    throw ParamError("--task must be parity or arith, got '" + task + "'");
  tasks::write_jsonl(out, samples);
  std::cout << "wrote " << n << " " << task << " samples (lengths " << min_len << ".." << max_len
            << ", seed " << seed << ") to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, std::string data_dir, const std::string& out_dir,
              const std::string& method, int g, double alpha, const std::string& connections,
              const std::string& resume) {
  trainer::TrainConfig cfg = trainer::load_train_config(config_path);
  if (!method.empty()) cfg.method = method;
  if (g > 0) cfg.group_size = g;
  if (alpha >= 0.0) cfg.alpha = static_cast<float>(alpha);
  if (!connections.empty()) cfg.connections = resolve_connections(connections);
  if (data_dir.empty()) data_dir = default_data_dir();
  if (data_dir.empty())
    throw ParamError("no data directory: pass --data or set TURBOCONN_DATA_DIR");
  if (cfg.method == "turboconn" && cfg.connections.empty())
    throw ParamError("method turboconn requires --connections <preset|file>");

  const trainer::RunResult res = trainer::run(cfg, data_dir, out_dir, resume);
  std::cout << "trained " << cfg.method << " for " << res.steps << " steps; final loss "
            << res.final_loss << ", val accuracy " << res.final_val_accuracy << "; metrics at "
            << res.metrics_path << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_file, double temperature,
             const std::string& out) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  tasks::Vocab vocab;
  const std::vector<tasks::Sample> samples = tasks::read_jsonl(data_file, vocab);
  if (samples.empty()) throw IoError("no samples in " + data_file);

  const double acc = evalkit::accuracy(*ck.model, vocab, samples,
                                       static_cast<float>(temperature), 1, ck.meta.method,
                                       ck.meta.soft_lambda);
  const double elim = evalkit::eliminated_choices(*ck.model, vocab, samples);

  evalkit::MetricsRow row;
  row.task = "eval";
  row.split = std::filesystem::path(data_file).stem().string();
  row.method = ck.meta.method;
  row.group_size = ck.model->spec().group_size;
  row.alpha = ck.model->spec().alpha;
  row.length = 0;
  row.n = static_cast<int>(samples.size());
  row.accuracy = acc;
  row.eliminated_mean = elim;
  if (!out.empty()) evalkit::write_metrics_csv(out, {row});
  std::cout << "evaluated " << samples.size() << " samples: accuracy " << acc
            << ", eliminated choices " << elim << (out.empty() ? "" : "; csv at " + out) << "\n";
  return 0;
}

int cmd_sweep_length(const std::string& checkpoint, const std::string& task,
                     const std::string& lens_arg, int n_per_len, double temperature,
                     std::uint64_t seed, const std::string& out) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  tasks::Vocab vocab;
  const std::vector<int> lens = parse_lens(lens_arg);
  const auto rows = evalkit::length_sweep(*ck.model, vocab, task, lens, n_per_len, seed,
                                          static_cast<float>(temperature), ck.meta.method,
                                          ck.meta.soft_lambda);
  evalkit::write_metrics_csv(out, rows);
  std::cout << "swept " << lens.size() << " lengths x " << n_per_len << " samples on " << task
            << "; csv at " << out << "\n";
  return 0;
}

int cmd_analyze_depth(int layers, int seq_len, int g, const std::string& connections,
                      const std::string& out_csv) {
  ConnectionSpec spec;
  spec.group_size = g;
  spec.connections = resolve_connections(connections);
  const int depth = analysis::max_depth(layers, seq_len, spec);
  const int steps = analysis::sequential_steps(seq_len, g);
  analysis::DepthRow row{layers, seq_len, g, static_cast<int>(spec.connections.size()), depth,
                         steps};
  std::cout << analysis::depth_report_text({row});
  std::cout << depth << "\n";
  if (!out_csv.empty()) {
    std::ofstream os(out_csv, std::ios::binary);
    if (!os) throw IoError("cannot open " + out_csv);
    os << analysis::depth_report_csv({row});
  }
  return 0;
}

int cmd_count_params(const std::string& dims, int rank, int rank_d, int n_conn) {
  int d = 0, dkv = 0, dinter = 0, layers = 0;
  if (dims == "llama1b") {
    d = 2048; dkv = 512; dinter = 8192; layers = 16;
  } else if (dims == "llama8b") {
    d = 4096; dkv = 1024; dinter = 14336; layers = 32;
  } else if (dims == "qwen17b") {
    d = 2048; dkv = 1024; dinter = 6144; layers = 28;
  } else {
    if (std::sscanf(dims.c_str(), "%d,%d,%d,%d", &d, &dkv, &dinter, &layers) != 4)
      throw ParamError("--dims must be llama1b, llama8b, qwen17b or 'd,dkv,dinter,L'");
  }
  const analysis::ParamCounts pc =
      analysis::count_params(d, dkv, dinter, layers, rank, n_conn, rank_d);
  std::cout << "per_block " << with_thousands(pc.per_block) << ", per_connection "
            << with_thousands(pc.per_connection) << "\n";
  std::cout << "baseline_total " << with_thousands(pc.baseline_total) << "\n";
  std::cout << "turboconn_total " << with_thousands(pc.turboconn_total) << "\n";
  std::cout << with_thousands(n_conn > 0 ? pc.turboconn_total : pc.baseline_total) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"turboconn: decoder transformer with downward cross-token connections"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a task dataset as JSON lines");
  std::string gd_task, gd_out;
  int gd_n = 1000, gd_min = 1, gd_max = 70;
  std::uint64_t gd_seed = 0;
  gen->add_option("--task", gd_task, "parity | arith")->required();
  gen->add_option("--n", gd_n, "number of samples")->required();
  gen->add_option("--min-len", gd_min, "minimum length / operand count");
  gen->add_option("--max-len", gd_max, "maximum length / operand count");
  gen->add_option("--seed", gd_seed, "generator seed")->required();
  gen->add_option("--out", gd_out, "output .jsonl path")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model from a config file");
  std::string tr_config, tr_data, tr_out, tr_method, tr_conn, tr_resume;
  int tr_g = 0;
  double tr_alpha = -1.0;
  tr->add_option("--config", tr_config, "key=value train config")->required();
  tr->add_option("--data", tr_data, "dataset dir with train.jsonl and val.jsonl");
  tr->add_option("--out", tr_out, "run output dir")->required();
  tr->add_option("--method", tr_method, "baseline | turboconn | softtoken");
  tr->add_option("--g", tr_g, "group size override");
  tr->add_option("--alpha", tr_alpha, "connection multiplier override");
  tr->add_option("--connections", tr_conn, "connection preset name or table file");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset file");
  std::string ev_ckpt, ev_data, ev_out;
  double ev_temp = 1.0;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data, "dataset .jsonl file")->required();
  ev->add_option("--temperature", ev_temp, "decoding temperature");
  ev->add_option("--out", ev_out, "metrics csv path");

  // sweep-length
  auto* sw = app.add_subcommand("sweep-length", "accuracy across sequence lengths");
  std::string sw_ckpt, sw_task = "parity", sw_lens, sw_out;
  int sw_n = 200;
  double sw_temp = 0.01;
  std::uint64_t sw_seed = 7;
  sw->add_option("--checkpoint", sw_ckpt)->required();
  sw->add_option("--task", sw_task, "parity | arith");
  sw->add_option("--lens", sw_lens, "range like 1..70 or comma list")->required();
  sw->add_option("--n", sw_n, "samples per length");
  sw->add_option("--temperature", sw_temp, "decoding temperature");
  sw->add_option("--seed", sw_seed, "eval-set seed");
  sw->add_option("--out", sw_out, "metrics csv path")->required();

  // analyze-depth
  auto* ad = app.add_subcommand("analyze-depth", "longest path in the dependency graph");
  int ad_layers = 0, ad_seq = 0, ad_g = 1;
  std::string ad_conn, ad_csv;
  ad->add_option("--layers", ad_layers)->required();
  ad->add_option("--seq-len", ad_seq)->required();
  ad->add_option("--g", ad_g, "group size");
  ad->add_option("--connections", ad_conn, "preset name or table file");
  ad->add_option("--out", ad_csv, "csv report path");

  // count-params
  auto* cp = app.add_subcommand("count-params", "trainable-parameter accounting");
  std::string cp_dims;
  int cp_rank = 120, cp_rank_d = 120, cp_nconn = 0;
  cp->add_option("--dims", cp_dims, "llama1b | llama8b | qwen17b | d,dkv,dinter,L")->required();
  cp->add_option("--rank", cp_rank, "adapter rank");
  cp->add_option("--rank-d", cp_rank_d, "connection projection rank");
  cp->add_option("--n-conn", cp_nconn, "number of connections");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gd_task, gd_n, gd_min, gd_max, gd_seed, gd_out);
    if (tr->parsed())
      return cmd_train(tr_config, tr_data, tr_out, tr_method, tr_g, tr_alpha, tr_conn, tr_resume);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_temp, ev_out);
    if (sw->parsed())
      return cmd_sweep_length(sw_ckpt, sw_task, sw_lens, sw_n, sw_temp, sw_seed, sw_out);
    if (ad->parsed()) return cmd_analyze_depth(ad_layers, ad_seq, ad_g, ad_conn, ad_csv);
    if (cp->parsed()) return cmd_count_params(cp_dims, cp_rank, cp_rank_d, cp_nconn);
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitUsage;
}
