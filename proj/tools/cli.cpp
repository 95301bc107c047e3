#include "cli.hpp"

#include <algorithm>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "katrec/config.hpp"
#include "katrec/error.hpp"
#include "katrec/eval.hpp"
#include "katrec/io.hpp"
#include "katrec/trainer.hpp"

namespace katrec::cli {

namespace {

namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "katrec_out";
  std::string ablation;
  std::string split = "test";
  std::optional<std::size_t> max_len;
  std::vector<std::string> overrides;
  std::string checkpoint;
  std::string items;
};

// Files a command produced, in write order, for the run manifest.
class Run {
 public:
  Run(std::string command, const Options& opt, std::vector<std::string> args)
      : command_(std::move(command)), dir_(opt.out), args_(std::move(args)) {}

  const fs::path& dir() const { return dir_; }

  void write(const std::string& name, const std::string& bytes) {
    io::write_atomic(dir_ / name, bytes);
    outputs_[name] = io::sha256_hex(bytes);
  }
  void save(const std::string& name, const train::Trainer& t) { write(name, t.checkpoint_bytes()); }
  void input(const fs::path& path) { inputs_[path.string()] = io::sha256_file(path); }

  void finish(const RunConfig& config) {
    nlohmann::ordered_json m;
    m["command"] = command_;
    m["args"] = args_;
    m["seed"] = config.seed;
    m["config"] = to_toml(config);
    m["inputs"] = inputs_;
    m["outputs"] = outputs_;
    io::write_atomic(dir_ / "run_manifest.json", m.dump(2) + "\n");
  }

 private:
  std::string command_;
  fs::path dir_;
  std::vector<std::string> args_;
  std::map<std::string, std::string> inputs_;
  std::map<std::string, std::string> outputs_;
};

RunConfig resolve_config(const Options& opt, std::optional<RunConfig> base = std::nullopt) {
  RunConfig c;
  if (!opt.config.empty()) {
    c = load_config(opt.config);
  } else if (base) {
    c = *base;
  } else {
    fail("cli", "--config is required");
  }
  if (opt.seed) c.seed = *opt.seed;
  if (opt.max_len) c.seq.max_len = *opt.max_len;
  if (!opt.ablation.empty()) c.ablation = parse_ablation(opt.ablation);
  for (const auto& o : opt.overrides) apply_override(c, o);
  return apply_ablation(c, c.ablation);
}

data::Split parse_split(const std::string& s) {
  if (s == "val") return data::Split::val;
  if (s == "test") return data::Split::test;
  fail("cli", "--split must be val or test, got '", s, "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

train::Dataset dataset_for(const RunConfig& c, Run& run) {
  run.input(c.interactions);
  run.input(c.triplets);
  return train::load_dataset(c);
}

void write_report(Run& run, const std::string& stem, const eval::MetricReport& report) {
  run.write(stem + ".tsv", eval::metrics_tsv(report));
  run.write(stem + ".json", eval::metrics_json(report));
}

void print_summary(std::ostream& out, const eval::MetricReport& r) {
  const auto& m = r.overall;
  out << std::fixed << std::setprecision(4) << "Hit@1 " << m.hit_at(1) << "  Hit@5 " << m.hit_at(5) << "  Hit@10 "
      << m.hit_at(10) << "  NDCG@5 " << m.ndcg_at(5) << "  NDCG@10 " << m.ndcg_at(10) << "  MAP " << m.map
      << "  users " << m.users << '\n'
      << std::defaultfloat;
}

std::string history_tsv(const train::Trainer& t) {
  std::string s = "epoch\tkg_loss\tseq_loss\tprobe_loss\tval_ndcg10\n";
  for (const auto& h : t.history()) {
    s += std::to_string(h.epoch) + "\t" + fmt(h.kg_loss) + "\t" + fmt(h.seq_loss) + "\t" + fmt(h.probe_loss) + "\t" +
         fmt(h.val_ndcg) + "\n";
  }
  return s;
}

std::string losses_tsv(const std::vector<double>& losses) {
  std::string s = "step\tloss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) s += std::to_string(i) + "\t" + fmt(losses[i]) + "\n";
  return s;
}

std::string checkpoint_path(const Options& opt, const std::string& fallback) {
  return opt.checkpoint.empty() ? (fs::path(opt.out) / fallback).string() : opt.checkpoint;
}

int cmd_ingest(const Options& opt, Run& run, std::ostream& out) {
  const auto c = resolve_config(opt);
  const auto ds = dataset_for(c, run);
  const auto& log = ds.log;
  std::ostringstream table;
  table << "users\titems\tinteractions\tentities\trelations\ttriplets\tdensity\n"
        << log.num_users() << '\t' << log.num_items() << '\t' << log.num_interactions() << '\t'
        << ds.kg.num_entities() << '\t' << ds.kg.num_kg_relations() << '\t' << ds.kg.kg_triplets().size() << '\t'
        << fmt(log.density()) << '\n';
  run.write("stats.tsv", table.str());
  std::ostringstream ids;
  data::write_id_map(ids, log, ds.kg);
  run.write("id_map.tsv", ids.str());
  out << table.str();
  run.finish(c);
  return 0;
}

int cmd_pretrain(const Options& opt, Run& run, std::ostream& out) {
  const auto c = resolve_config(opt);
  const auto ds = dataset_for(c, run);
  train::Trainer t(c, ds);
  t.pretrain();
  run.save("pretrain.ckpt", t);
  run.write("pretrain_losses.tsv", losses_tsv(t.pretrain_losses()));
  if (!t.pretrain_losses().empty()) {
    out << "pretrain loss " << t.pretrain_losses().front() << " -> " << t.pretrain_losses().back() << " over "
        << t.pretrain_losses().size() << " steps\n";
  }
  run.finish(c);
  return 0;
}

// Trains one configuration and writes its artifacts under `prefix`.
eval::MetricReport train_one(const RunConfig& c, const train::Dataset& ds, Run& run, const std::string& prefix,
                             std::ostream& out) {
  train::Trainer t(c, ds);
  t.train([&](const train::EpochRecord& r) {
    out << "epoch " << r.epoch << "  kg " << fmt(r.kg_loss) << "  cloze " << fmt(r.seq_loss) << "  val NDCG@10 "
        << fmt(r.val_ndcg) << '\n';
  });
  run.save(prefix + "model.ckpt", t);
  run.write(prefix + "history.tsv", history_tsv(t));
  run.write(prefix + "kg_steps.tsv", losses_tsv(t.kg_step_losses()));
  run.write(prefix + "seq_steps.tsv", losses_tsv(t.seq_step_losses()));
  const auto report = t.evaluate(data::Split::test);
  write_report(run, prefix + "metrics", report);
  return report;
}

int cmd_train(const Options& opt, Run& run, std::ostream& out) {
  const auto c = resolve_config(opt);
  const auto ds = dataset_for(c, run);
  const auto report = train_one(c, ds, run, "", out);
  print_summary(out, report);
  run.finish(c);
  return 0;
}

int cmd_evaluate(const Options& opt, Run& run, std::ostream& out) {
  const auto path = checkpoint_path(opt, "model.ckpt");
  const auto bytes = io::read_file(path);
  const auto c = resolve_config(opt, train::Trainer::stored_config(bytes));
  const auto ds = dataset_for(c, run);
  run.input(path);
  const auto t = train::Trainer::from_bytes(bytes, ds, &c);
  const auto split = parse_split(opt.split);
  const auto report = t.evaluate(split);
  write_report(run, "metrics_" + opt.split, report);
  print_summary(out, report);
  run.finish(c);
  return 0;
}

int cmd_ablate(const Options& opt, Run& run, std::ostream& out) {
  const auto base = resolve_config(opt);
  const auto ds = dataset_for(base, run);
  std::vector<Ablation> variants{Ablation::none};
  variants.insert(variants.end(), std::begin(kAblationVariants), std::end(kAblationVariants));
  std::string table = "variant\tHit@1\tHit@5\tHit@10\tNDCG@5\tNDCG@10\tMAP\n";
  for (auto v : variants) {
    out << "== " << ablation_label(v) << '\n';
    const auto c = apply_ablation(base, v);
    const auto r = train_one(c, ds, run, std::string("ablation/") + ablation_name(v) + "/", out).overall;
    table += std::string(ablation_label(v)) + "\t" + fmt(r.hit_at(1)) + "\t" + fmt(r.hit_at(5)) + "\t" +
             fmt(r.hit_at(10)) + "\t" + fmt(r.ndcg_at(5)) + "\t" + fmt(r.ndcg_at(10)) + "\t" + fmt(r.map) + "\n";
  }
  run.write("ablation.tsv", table);
  out << table;
  run.finish(base);
  return 0;
}

int cmd_export_attention(const Options& opt, Run& run, std::ostream& out) {
  const auto path = checkpoint_path(opt, "model.ckpt");
  const auto bytes = io::read_file(path);
  const auto c = resolve_config(opt, train::Trainer::stored_config(bytes));
  const auto ds = dataset_for(c, run);
  run.input(path);
  const auto t = train::Trainer::from_bytes(bytes, ds, &c);
  const auto split = parse_split(opt.split);
  const auto& p = t.seq_params();
  std::vector<std::vector<std::size_t>> sequences;
  for (data::UserId u = 0; u < ds.log.num_users(); ++u) {
    sequences.push_back(data::build_inference_input(ds.log.history(u, split), p.config.max_len, p.vocab()));
  }
  for (std::size_t l = 1; l <= p.config.layers; ++l) {
    for (std::size_t h = 1; h <= p.config.heads; ++h) {
      const auto m = eval::export_attention(p, sequences, l, h, c.attention_window);
      run.write("attn_L" + std::to_string(l) + "_H" + std::to_string(h) + ".tsv", eval::matrix_tsv(m));
    }
  }
  out << "wrote " << p.config.layers * p.config.heads << " attention matrices of size " << c.attention_window
      << " to " << run.dir().string() << '\n';
  run.finish(c);
  return 0;
}

int cmd_cooccurrence(const Options& opt, Run& run, std::ostream& out) {
  const auto c = resolve_config(opt);
  const auto ds = dataset_for(c, run);
  const auto& log = ds.log;
  std::vector<data::ItemId> items;
  if (opt.items.empty()) {
    // Default subset: the 15 most frequent items, ties broken by id.
    std::vector<std::size_t> freq(log.num_items(), 0);
    for (data::UserId u = 0; u < log.num_users(); ++u)
      for (auto i : log.sequence(u)) ++freq[i];
    std::vector<data::ItemId> order(log.num_items());
    for (data::ItemId i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return freq[a] > freq[b]; });
    order.resize(std::min<std::size_t>(order.size(), 15));
    items = order;
  } else {
    std::stringstream ss(opt.items);
    for (std::string raw; std::getline(ss, raw, ',');) {
      const auto it = log.item_index().find(raw);
      if (it == log.item_index().end()) fail("cooccurrence", "unknown item '", raw, "'");
      items.push_back(it->second);
    }
  }
  std::vector<std::string> header;
  for (auto i : items) header.push_back(log.item_raw()[i]);
  run.write("cooccurrence.tsv", eval::matrix_tsv(eval::cooccurrence_matrix(log, items), header));
  out << "wrote " << items.size() << "x" << items.size() << " co-occurrence matrix\n";
  run.finish(c);
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"KATRec: knowledge-graph attentive sequential recommendation"};
  app.require_subcommand(1);
  Options opt;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"ingest", "Validate and remap the data, print dataset statistics"},
      {"pretrain-kg", "Pretrain the knowledge-graph embeddings"},
      {"train", "Pretrain, jointly train and evaluate on the test split"},
      {"evaluate", "Evaluate a checkpoint"},
      {"ablate", "Train the full model and all five ablation variants"},
      {"export-attention", "Export average transformer attention per layer and head"},
      {"cooccurrence", "Export the item co-occurrence ratio matrix"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "Run configuration file");
    sub->add_option("--seed", opt.seed, "Random seed");
    sub->add_option("--out", opt.out, "Output directory")->capture_default_str();
    sub->add_option("--ablation", opt.ablation, "none, no_attention, level1, connection, no_pretrain or concat");
    sub->add_option("--split", opt.split, "val or test")->capture_default_str();
    sub->add_option("--max-len", opt.max_len, "Maximum sequence length");
    sub->add_option("--set", opt.overrides, "Override a configuration key: section.key=value");
    sub->add_option("--checkpoint", opt.checkpoint, "Checkpoint to load (default <out>/model.ckpt)");
    sub->add_option("--items", opt.items, "Comma-separated raw item ids");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << nlohmann::json{{"error", "usage"}, {"message", e.what()}}.dump() << '\n';
    return 2;
  }

  const auto* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    Run run(command, opt, std::vector<std::string>(args.begin() + 1, args.end()));
    if (command == "ingest") return cmd_ingest(opt, run, out);
    if (command == "pretrain-kg") return cmd_pretrain(opt, run, out);
    if (command == "train") return cmd_train(opt, run, out);
    if (command == "evaluate") return cmd_evaluate(opt, run, out);
    if (command == "ablate") return cmd_ablate(opt, run, out);
    if (command == "export-attention") return cmd_export_attention(opt, run, out);
    return cmd_cooccurrence(opt, run, out);
  } catch (const Error& e) {
    err << nlohmann::json{{"error", e.where()}, {"command", command}, {"message", e.what()}}.dump() << '\n';
  } catch (const std::exception& e) {
    err << nlohmann::json{{"error", "internal"}, {"command", command}, {"message", e.what()}}.dump() << '\n';
  }
  return 1;
}

}  // namespace katrec::cli
