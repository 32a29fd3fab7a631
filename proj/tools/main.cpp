#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "sinkattn/checkpoint.hpp"
#include "sinkattn/config.hpp"
#include "sinkattn/data.hpp"
#include "sinkattn/eval.hpp"
#include "sinkattn/kvcache.hpp"
#include "sinkattn/rng.hpp"

namespace fs = std::filesystem;
using namespace sinkattn;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// Deterministic worker pool: items are claimed by index, results are stored
// by index, so the merged output order never depends on scheduling.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&]() {
      for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

void ensure_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

void echo_config(const ExperimentConfig& cfg, const std::string& dir) {
  std::ofstream os(dir + "/config.json");
  if (!os) throw IoError("cannot write resolved config to '" + dir + "'");
  os << experiment_config_to_json(cfg).dump(2) << "\n";
}

// Per-step training batch, reproducible from (seed, step) alone so that a
// resumed run sees exactly the data an uninterrupted run would.
std::vector<std::vector<int>> assemble_batch(const ExperimentConfig& cfg,
                                             const std::vector<int>& stream, std::size_t step) {
  std::vector<std::vector<int>> batch;
  batch.reserve(cfg.training.batch);
  for (std::size_t b = 0; b < cfg.training.batch; ++b) {
    if (cfg.training.data.kind == "copy_task") {
      batch.push_back(make_copy_sequence(mix64(cfg.training.seed, step, b),
                                         cfg.training.data.prefix_len,
                                         cfg.training.data.filler_len, cfg.model.vocab_size));
    } else {
      const std::size_t len = cfg.training.seq_len;
      if (stream.size() < len + 1) throw ConfigError("training data shorter than seq_len");
      const std::size_t start = mix64(cfg.training.seed, step, b) % (stream.size() - len);
      batch.emplace_back(stream.begin() + start, stream.begin() + start + len);
    }
  }
  return batch;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& resume_path) {
  ensure_out_dir(cfg.out_dir);
  echo_config(cfg, cfg.out_dir);

  DecoderModel model;
  AdamState opt;
  std::size_t start_step = 0;
  if (!resume_path.empty()) {
    LoadedCheckpoint ck = load_checkpoint(resume_path, cfg.model);
    model = std::move(ck.model);
    opt = std::move(ck.opt);
    start_step = opt.step;
    if (!ck.has_optimizer) {
      std::cerr << "note: checkpoint has no optimizer state, restarting the schedule\n";
    }
  } else {
    model = init_model(cfg.model);
    if (cfg.training.lora_enabled) {
      TrainabilityPolicy policy;
      policy.embeddings = cfg.training.train_embeddings;
      policy.norms = cfg.training.train_norms;
      attach_lora(model, cfg.training.lora_targets, cfg.training.lora_rank, cfg.training.lora_alpha,
                  policy, cfg.training.seed);
    }
  }

  std::vector<int> stream;
  if (cfg.training.data.kind != "copy_task") {
    stream = load_tokens(cfg.training.data, cfg.model.vocab_size);
  }

  std::ofstream csv(cfg.out_dir + "/loss.csv", start_step == 0 ? std::ios::trunc : std::ios::app);
  if (!csv) throw IoError("cannot write loss.csv");
  if (start_step == 0) csv << "step,loss,lr,wallclock_ms\n";
  csv.precision(12);

  const auto t0 = Clock::now();
  for (std::size_t step = start_step; step < cfg.training.steps; ++step) {
    const double lr = warmup_lr(cfg.training.lr, step, cfg.training.warmup);
    const auto batch = assemble_batch(cfg, stream, step);
    const double loss = train_step(model, batch, cfg.attn, opt, lr);
    csv << step << "," << loss << "," << lr << "," << ms_since(t0) << "\n";
    if ((step + 1) % 50 == 0 || step + 1 == cfg.training.steps) {
      std::cerr << "step " << (step + 1) << "/" << cfg.training.steps << " loss " << loss << "\n";
    }
  }
  save_checkpoint(cfg.out_dir + "/checkpoint.bin", model, &opt);
  std::cout << "checkpoint written to " << cfg.out_dir << "/checkpoint.bin\n";
  return 0;
}

int cmd_eval_ppl(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                 const std::string& data_path) {
  ensure_out_dir(cfg.out_dir);
  echo_config(cfg, cfg.out_dir);
  LoadedCheckpoint ck = load_checkpoint(checkpoint_path, cfg.model);

  DataSpec data = cfg.training.data;
  if (!data_path.empty()) {
    data.kind = "file";
    data.path = data_path;
  }
  const std::vector<int> stream = load_tokens(data, cfg.model.vocab_size);

  std::ofstream out(cfg.out_dir + "/ppl.jsonl");
  if (!out) throw IoError("cannot write ppl.jsonl");
  std::vector<PplReport> reports;
  for (std::size_t context : cfg.eval.context_lengths) {
    PplReport r = perplexity(ck.model, stream, context, std::min(cfg.eval.stride, context));
    out << r.to_json_line() << "\n";
    std::cout << r.to_json_line() << "\n";
    reports.push_back(r);
  }
  for (std::size_t i = 1; i < reports.size(); ++i) {
    const char* rel = reports[i].perplexity <= reports[i - 1].perplexity ? "<=" : ">";
    std::cerr << "ppl ordering: context " << reports[i].context_length << " " << rel
              << " context " << reports[i - 1].context_length << "\n";
  }
  return 0;
}

int cmd_passkey(const ExperimentConfig& cfg, const std::string& checkpoint_path, bool oracle_mode,
                std::size_t threads) {
  ensure_out_dir(cfg.out_dir);
  echo_config(cfg, cfg.out_dir);
  DecoderModel model;
  if (!oracle_mode) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint_path, cfg.model);
    model = std::move(ck.model);
  }

  struct Cell {
    std::size_t m, n, doc_len;
    double accuracy;
  };
  const auto& pk = cfg.passkey;
  std::vector<Cell> cells(pk.m_values.size() * pk.n_values.size());
  parallel_for(cells.size(), threads, [&](std::size_t idx) {
    const std::size_t m = pk.m_values[idx / pk.n_values.size()];
    const std::size_t n = pk.n_values[idx % pk.n_values.size()];
    std::size_t hits = 0;
    std::size_t doc_len = 0;
    for (std::size_t trial = 0; trial < pk.trials; ++trial) {
      PasskeyDoc doc = passkey_gen(m, n, mix64(pk.seed, idx, trial));
      doc_len = doc.tokens.size();
      if (oracle_mode) {
        const auto got = oracle_retrieve(doc.text);
        hits += (got && *got == doc.passkey) ? 1 : 0;
      } else {
        KVCache cache = make_cache(cfg.model, EvictionPolicy::full());
        const std::vector<int> gen = greedy_generate(model, cache, doc.tokens, 8);
        hits += passkey_score(decode_bytes(gen), doc) ? 1 : 0;
      }
    }
    cells[idx] = {m, n, doc_len, static_cast<double>(hits) / static_cast<double>(pk.trials)};
  });

  std::ofstream csv(cfg.out_dir + "/passkey.csv");
  if (!csv) throw IoError("cannot write passkey.csv");
  csv << "M,N,doc_len,accuracy\n";
  for (const Cell& c : cells) {
    csv << c.m << "," << c.n << "," << c.doc_len << "," << c.accuracy << "\n";
  }
  std::cout << "passkey grid written to " << cfg.out_dir << "/passkey.csv\n";
  return 0;
}

EvictionPolicy policy_for(const std::string& name, std::size_t budget, const KvBenchConfig& kb) {
  switch (policy_kind_from_name(name)) {
    case PolicyKind::Full:
      return EvictionPolicy::full();
    case PolicyKind::Local:
      return EvictionPolicy::local(budget);
    case PolicyKind::H2O: {
      std::size_t recent = static_cast<std::size_t>(kb.recent_frac * static_cast<double>(budget));
      recent = std::min(std::max<std::size_t>(recent, 1), budget - 1);
      return EvictionPolicy::h2o(budget, recent);
    }
    case PolicyKind::Sink:
      return EvictionPolicy::sink(std::min(kb.num_sink, budget - 1), budget);
  }
  throw ConfigError("unknown policy");
}

int cmd_kv_bench(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                 std::size_t threads) {
  ensure_out_dir(cfg.out_dir);
  echo_config(cfg, cfg.out_dir);
  LoadedCheckpoint ck = load_checkpoint(checkpoint_path, cfg.model);
  const DecoderModel& model = ck.model;
  const KvBenchConfig& kb = cfg.kv_bench;

  // fixed prompt set, decoded teacher-forced so logits are comparable
  std::vector<std::vector<int>> prompts;
  for (std::size_t p = 0; p < kb.n_prompts; ++p) {
    DataSpec spec = kb.prompts;
    spec.seed = mix64(kb.prompts.seed, p);
    std::vector<int> tokens = load_tokens(spec, cfg.model.vocab_size);
    if (spec.kind != "copy_task") {
      const std::size_t len = std::min<std::size_t>(tokens.size(), cfg.training.seq_len);
      tokens.resize(len);
    }
    prompts.push_back(std::move(tokens));
  }

  // reference logits under the full policy
  std::vector<std::vector<std::vector<double>>> full_logits(prompts.size());
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    KVCache cache = make_cache(cfg.model, EvictionPolicy::full());
    for (int tok : prompts[p]) full_logits[p].push_back(decode_step(model, cache, tok));
  }

  struct GridPoint {
    std::string policy;
    std::size_t budget_pct;
    std::vector<double> divergence;     // per step, mean over prompts
    std::vector<double> cache_size;     // per step, mean over prompts
    std::vector<double> retained_mass;  // per step, mean over prompts
    double wallclock_ms = 0.0;
  };
  std::vector<GridPoint> grid(kb.policies.size() * kb.budgets_pct.size());
  parallel_for(grid.size(), threads, [&](std::size_t idx) {
    GridPoint& gp = grid[idx];
    gp.policy = kb.policies[idx / kb.budgets_pct.size()];
    gp.budget_pct = kb.budgets_pct[idx % kb.budgets_pct.size()];
    const auto t0 = Clock::now();
    const std::size_t steps = prompts.front().size();
    gp.divergence.assign(steps, 0.0);
    gp.cache_size.assign(steps, 0.0);
    gp.retained_mass.assign(steps, 0.0);
    for (std::size_t p = 0; p < prompts.size(); ++p) {
      const std::size_t total = prompts[p].size();
      const std::size_t budget =
          std::max<std::size_t>(2, (gp.budget_pct * total + 99) / 100);
      KVCache cache = make_cache(cfg.model, policy_for(gp.policy, budget, kb));
      for (std::size_t s = 0; s < total; ++s) {
        const std::vector<double> logits = decode_step(model, cache, prompts[p][s]);
        double d = 0.0;
        for (std::size_t j = 0; j < logits.size(); ++j) {
          d = std::max(d, std::abs(logits[j] - full_logits[p][s][j]));
        }
        const CacheStats st = cache_stats(cache);
        gp.divergence[s] += d / static_cast<double>(prompts.size());
        gp.cache_size[s] +=
            static_cast<double>(st.size) / static_cast<double>(prompts.size());
        gp.retained_mass[s] += st.retained_score_mass / static_cast<double>(prompts.size());
      }
    }
    gp.wallclock_ms = ms_since(t0);
  });

  std::ofstream csv(cfg.out_dir + "/kv_bench.csv");
  if (!csv) throw IoError("cannot write kv_bench.csv");
  csv.precision(12);
  csv << "policy,budget_pct,step,cache_size,retained_mass,logit_divergence_vs_full\n";
  for (const GridPoint& gp : grid) {
    for (std::size_t s = 0; s < gp.divergence.size(); ++s) {
      csv << gp.policy << "," << gp.budget_pct << "," << s << "," << gp.cache_size[s] << ","
          << gp.retained_mass[s] << "," << gp.divergence[s] << "\n";
    }
  }
  std::ofstream summary(cfg.out_dir + "/kv_bench_summary.csv");
  if (!summary) throw IoError("cannot write kv_bench_summary.csv");
  summary << "policy,budget_pct,wallclock_ms,final_divergence\n";
  for (const GridPoint& gp : grid) {
    summary << gp.policy << "," << gp.budget_pct << "," << gp.wallclock_ms << ","
            << gp.divergence.back() << "\n";
  }
  std::cout << "kv bench written to " << cfg.out_dir << "/kv_bench.csv\n";
  return 0;
}

int cmd_mask_dump(const PatternSpec& spec, std::size_t n, const std::string& out_dir) {
  ensure_out_dir(out_dir);
  const AttentionMask mask = build_mask(spec, n);
  {
    std::ofstream pgm(out_dir + "/mask.pgm");
    if (!pgm) throw IoError("cannot write mask.pgm");
    write_mask_pgm(mask, pgm);
  }
  {
    std::ofstream csv(out_dir + "/mask.csv");
    if (!csv) throw IoError("cannot write mask.csv");
    write_mask_csv(mask, csv);
  }
  std::cout << "mask (" << pattern_kind_name(spec.kind) << ", n=" << n << ", nnz=" << nnz(mask)
            << ") written to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Long-context attention experiment runner"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, out_dir, data_path;
  std::int64_t seed_override = -1;
  std::size_t threads = std::thread::hardware_concurrency();
  bool oracle_mode = false;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", config_path, "experiment config JSON");
    if (needs_config) opt->required();
    sub->add_option("--out", out_dir, "output directory (overrides config)");
    sub->add_option("--seed", seed_override, "seed override");
    sub->add_option("--threads", threads, "worker pool size for grid points");
  };

  CLI::App* train = app.add_subcommand("train", "train a toy model under the configured pattern");
  add_common(train, true);
  train->add_option("--checkpoint", checkpoint_path, "resume from this checkpoint");

  CLI::App* eval_ppl = app.add_subcommand("eval-ppl", "sliding-window perplexity of a checkpoint");
  add_common(eval_ppl, true);
  eval_ppl->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  eval_ppl->add_option("--data", data_path, "UTF-8 text file to evaluate on");

  CLI::App* passkey = app.add_subcommand("passkey", "passkey retrieval accuracy grid");
  add_common(passkey, true);
  passkey->add_option("--checkpoint", checkpoint_path, "model checkpoint");
  passkey->add_flag("--oracle", oracle_mode, "score the rule-based reference retriever instead");

  CLI::App* kv_bench = app.add_subcommand("kv-bench", "KV cache policy/budget sweep");
  add_common(kv_bench, true);
  kv_bench->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();

  CLI::App* mask_dump = app.add_subcommand("mask-dump", "write a pattern mask as PGM + CSV");
  std::string kind_name = "full_causal";
  std::size_t mask_n = 64;
  PatternSpec mask_spec;
  mask_dump->add_option("--kind", kind_name,
                        "full_causal|group|shifted_group|sink_fixed|sparse_fixed|stride|random");
  mask_dump->add_option("--n", mask_n, "sequence length");
  mask_dump->add_option("--group-size", mask_spec.group_size, "group width w");
  mask_dump->add_option("--num-sink", mask_spec.num_sink, "sink token count g");
  mask_dump->add_option("--stride", mask_spec.stride, "stride s");
  mask_dump->add_option("--random-k", mask_spec.random_k, "random edges per row");
  mask_dump->add_option("--seed", mask_spec.seed, "random pattern seed");
  mask_dump->add_option("--out", out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (mask_dump->parsed()) {
      mask_spec.kind = pattern_kind_from_name(kind_name);
      return cmd_mask_dump(mask_spec, mask_n, out_dir);
    }

    ExperimentConfig cfg = load_experiment_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (seed_override >= 0) {
      cfg.training.seed = static_cast<std::uint64_t>(seed_override);
      cfg.model.seed = static_cast<std::uint64_t>(seed_override);
    }
    cfg.validate();

    if (train->parsed()) return cmd_train(cfg, checkpoint_path);
    if (eval_ppl->parsed()) return cmd_eval_ppl(cfg, checkpoint_path, data_path);
    if (passkey->parsed()) {
      if (!oracle_mode && checkpoint_path.empty()) {
        throw ConfigError("passkey: --checkpoint is required unless --oracle is set");
      }
      return cmd_passkey(cfg, checkpoint_path, oracle_mode, threads);
    }
    if (kv_bench->parsed()) return cmd_kv_bench(cfg, checkpoint_path, threads);
    throw ConfigError("no subcommand");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
