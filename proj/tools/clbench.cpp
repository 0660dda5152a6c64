// clbench: command-line front end for the contrastive text-classification
// workbench. Exit status: 0 success, 1 usage error, 2 runtime failure.

#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "clbench/clbench.hpp"

namespace fs = std::filesystem;
using namespace clbench;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

std::string method_check(const std::string& s) {
  if (parse_method(s)) return {};
  return "unknown method '" + s + "'; valid methods: " + method_list();
}

std::string fraction_check(const std::string& s) {
  double f = 0.0;
  try {
    f = std::stod(s);
  } catch (const std::exception&) {
    return "not a number: " + s;
  }
  for (double allowed : kDataFractions)
    if (std::abs(allowed - f) < 1e-12) return {};
  return "fraction " + s + " not in {0.10, 0.25, 0.50, 1.00}";
}

std::string resolve_out(const std::string& flag, const std::string& fallback) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("CLBENCH_OUT"); env && *env) return env;
  return fallback;
}

Dataset load_dataset(const std::string& dir, const std::string& task) {
  auto split = [&](const char* name, Split s) {
    auto r = ingest_file((fs::path(dir) / (std::string(name) + ".tsv")).string(), s);
    for (const auto& bad : r.malformed)
      std::cerr << "warning: " << name << ".tsv:" << bad.line << ": " << bad.reason << '\n';
    return std::move(r.corpus);
  };
  auto train = split("train", Split::Train);
  auto dev = split("dev", Split::Dev);
  auto test = split("test", Split::Test);
  std::string name = task.empty() ? fs::path(dir).lexically_normal().filename().string() : task;
  if (name.empty() || name == ".") name = "task";
  return Dataset::from_splits(name, std::move(train), std::move(dev), std::move(test));
}

/// Re-expresses a corpus's labels in the checkpoint's class ids.
TokenizedSplit tokenize_for(const Checkpoint<float>& ckpt, const LabeledCorpus& corpus) {
  TokenizedSplit out;
  const auto max_len = ckpt.model.config().encoder.max_len;
  for (const auto& e : corpus.examples) {
    const auto& name = corpus.classes[static_cast<std::size_t>(e.label)];
    auto it = std::find(ckpt.classes.begin(), ckpt.classes.end(), name);
    if (it == ckpt.classes.end()) throw std::runtime_error("class '" + name + "' is not known to the checkpoint");
    out.ids.push_back(ckpt.vocab.tokenize(e.text, max_len));
    out.labels.push_back(static_cast<int>(it - ckpt.classes.begin()));
  }
  return out;
}

struct TrainFlags {
  TrainConfig cfg;
  std::string method = "ce";
  std::string data;
  std::string out;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool with_method) {
  auto& c = f.cfg;
  cmd->add_option("--data", f.data, "Directory holding train.tsv, dev.tsv and test.tsv")->required();
  cmd->add_option("--task", c.task, "Task name recorded in the run (default: data directory name)");
  if (with_method)
    cmd->add_option("--method", f.method, "Training objective: " + method_list())
        ->check(CLI::Validator(method_check, "METHOD"));
  cmd->add_option("--out", f.out, "Output directory (default: $CLBENCH_OUT or ./runs)");
  cmd->add_option("--seed", c.seed, "Seed for every random choice")->capture_default_str();

  cmd->add_option("--batch-size", c.batch_size)->capture_default_str();
  cmd->add_option("--lr", c.learning_rate, "Adam learning rate")->capture_default_str();
  cmd->add_option("--max-epochs", c.max_epochs)->capture_default_str();
  cmd->add_option("--patience", c.patience, "Epochs without dev macro-F1 gain before stopping")->capture_default_str();
  cmd->add_option("--max-seq-len", c.max_seq_len)->capture_default_str();
  cmd->add_option("--lambda", c.lambda, "Weight of the contrastive term")->capture_default_str();
  cmd->add_option("--tau", c.tau, "Temperature")->capture_default_str();
  cmd->add_option("--epsilon", c.epsilon, "FGSM radius")->capture_default_str();
  cmd->add_option("--data-fraction", c.data_fraction)->capture_default_str();
  cmd->add_option("--train-cap", c.train_cap)->capture_default_str();
  cmd->add_option("--dev-cap", c.dev_cap)->capture_default_str();
  cmd->add_option("--test-cap", c.test_cap)->capture_default_str();

  cmd->add_option("--hidden", c.hidden)->capture_default_str();
  cmd->add_option("--layers", c.layers)->capture_default_str();
  cmd->add_option("--heads", c.heads)->capture_default_str();
  cmd->add_option("--ffn", c.ffn)->capture_default_str();
  cmd->add_option("--projection-dim", c.projection_dim)->capture_default_str();
  cmd->add_option("--weighting-hidden", c.weighting_hidden, "0: half of --hidden")->capture_default_str();
  cmd->add_option("--weighting-layers", c.weighting_layers, "0: half of --layers")->capture_default_str();
  cmd->add_option("--keep-prob", c.keep_prob, "Dropout keep probability")->capture_default_str();
  cmd->add_option("--vocab-max", c.vocab_max)->capture_default_str();
  cmd->add_option("--beta1", c.beta1)->capture_default_str();
  cmd->add_option("--beta2", c.beta2)->capture_default_str();
  cmd->add_option("--adam-eps", c.adam_eps)->capture_default_str();

  cmd->add_option("--sign", c.sign, "FGSM step direction")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, FgsmSign>{{"printed", FgsmSign::Printed}, {"ascent", FgsmSign::Ascent}},
          CLI::ignore_case));
  cmd->add_option("--infonce", c.infonce_direction, "InfoNCE anchors")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, InfoNceDirection>{{"both", InfoNceDirection::Both},
                                                  {"single", InfoNceDirection::Single}},
          CLI::ignore_case));
  cmd->add_option("--reduction", c.reduction, "Reduction of summed contrastive losses")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, ContrastReduction>{{"mean", ContrastReduction::Mean},
                                                   {"sum", ContrastReduction::Sum}},
          CLI::ignore_case));
  cmd->add_flag("--balanced-sampler", c.balanced_sampler, "Interleave classes within batches");
  cmd->add_flag("--weighting-sees-adversarial", c.weighting_sees_adversarial,
                "TLCL weights computed from the perturbed representation");
  cmd->add_flag("--project-all", c.project_all, "Project SCL/LCL representations before the loss");
  cmd->add_flag("--track-train-accuracy", c.track_train_accuracy);
}

std::vector<Method> parse_methods(const std::vector<std::string>& names) {
  std::vector<Method> out;
  for (const auto& n : names) out.push_back(*parse_method(n));
  return out;
}

void print_run(const RunRecord& r, const std::string& dir) {
  std::cout << method_name(r.config.method) << " on " << r.config.task << ": best epoch " << r.best_epoch << " of "
            << r.epochs.size() << ", dev macro-F1 " << detail::percent(r.best_dev_f1) << ", test macro-F1 "
            << detail::percent(r.test_macro_f1);
  if (r.diverged) std::cout << " [" << r.status << "]";
  std::cout << '\n';
  if (!dir.empty()) std::cout << "wrote " << (fs::path(dir) / "checkpoint.bin").string() << '\n';
}

std::vector<RunRecord> collect_runs(const std::vector<std::string>& paths) {
  std::vector<std::string> files;
  for (const auto& p : paths) {
    if (fs::is_directory(p)) {
      std::vector<std::string> found;
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file() && e.path().filename() == "run.jsonl") found.push_back(e.path().string());
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.push_back(p);
    }
  }
  if (files.empty()) throw std::runtime_error("compare: no run.jsonl files found");
  std::vector<RunRecord> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw std::runtime_error("compare: cannot open " + f);
    out.push_back(read_run_record(in));
  }
  return out;
}

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  std::cout << "wrote " << path << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Supervised contrastive and adversarial text classification workbench"};
  app.require_subcommand(1);

  // synth
  SynthConfig synth;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic train/dev/test corpus");
  synth_cmd->add_option("--classes", synth.classes)->capture_default_str();
  synth_cmd->add_option("--size", synth.size, "Total examples over all splits")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed)->capture_default_str();
  synth_cmd->add_option("--difficulty", synth.difficulty, "0: disjoint class vocabularies, 1: identical")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  synth_cmd->add_option("--tokens-per-class", synth.tokens_per_class)->capture_default_str();
  synth_cmd->add_option("--shared-tokens", synth.shared_tokens)->capture_default_str();
  synth_cmd->add_option("--min-words", synth.min_words)->capture_default_str();
  synth_cmd->add_option("--max-words", synth.max_words)->capture_default_str();
  synth_cmd->add_option("--out", synth_out, "Output directory (default: $CLBENCH_OUT or ./synthetic)");

  // train
  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "Train one model and evaluate its best-dev checkpoint on test");
  add_train_flags(train_cmd, train_flags, true);

  // eval
  std::string eval_ckpt, eval_input;
  auto* eval_cmd = app.add_subcommand("eval", "Macro-F1 of a checkpoint on a labelled TSV file");
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--input", eval_input, "label<TAB>text file")->required()->check(CLI::ExistingFile);

  // sweep-data
  TrainFlags data_flags;
  std::vector<std::string> data_methods{"ce", "scl", "cat", "tact", "lcl", "tlcl"};
  std::vector<double> fractions{0.10, 0.25, 0.50, 1.00};
  auto* data_cmd = app.add_subcommand("sweep-data", "Test macro-F1 at 10/25/50/100% of the training data");
  add_train_flags(data_cmd, data_flags, false);
  data_cmd->add_option("--methods", data_methods)->delimiter(',')->check(CLI::Validator(method_check, "METHOD"));
  data_cmd->add_option("--fractions", fractions)->delimiter(',')->check(CLI::Validator(fraction_check, "FRACTION"));

  // sweep-batch
  TrainFlags batch_flags;
  std::vector<std::string> batch_methods{"ce", "scl", "cat", "tact", "lcl", "tlcl"};
  std::vector<std::size_t> batch_sizes{4, 8, 16};
  auto* batch_cmd = app.add_subcommand("sweep-batch", "Dev and test macro-F1 across batch sizes");
  add_train_flags(batch_cmd, batch_flags, false);
  batch_cmd->add_option("--methods", batch_methods)->delimiter(',')->check(CLI::Validator(method_check, "METHOD"));
  batch_cmd->add_option("--batch-sizes", batch_sizes)->delimiter(',');

  // project
  std::string proj_ckpt, proj_input, proj_output;
  auto* proj_cmd = app.add_subcommand("project", "2-D PCA of [CLS] representations as x,y,label_name CSV");
  proj_cmd->add_option("--checkpoint", proj_ckpt)->required()->check(CLI::ExistingFile);
  proj_cmd->add_option("--input", proj_input, "label<TAB>text file")->required()->check(CLI::ExistingFile);
  proj_cmd->add_option("--output", proj_output, "CSV path (default: <out>/projection.csv)");
  std::string proj_out;
  proj_cmd->add_option("--out", proj_out, "Output directory (default: $CLBENCH_OUT or .)");

  // compare
  std::vector<std::string> compare_paths;
  std::string compare_output;
  auto* compare_cmd = app.add_subcommand("compare", "Task x method grid of test macro-F1 with an Avg. row");
  compare_cmd->add_option("runs", compare_paths, "run.jsonl files or directories searched recursively")->required();
  compare_cmd->add_option("--output", compare_output, "TSV path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    if (*synth_cmd) {
      synth.name = "synthetic";
      const auto dir = resolve_out(synth_out, "synthetic");
      auto data = synth_corpus(synth);
      fs::create_directories(dir);
      for (const auto* split : {&data.train, &data.dev, &data.test})
        export_tsv_file(*split, (fs::path(dir) / (std::string(split_name(split->split)) + ".tsv")).string());
      std::cout << "wrote " << data.train.size() << '/' << data.dev.size() << '/' << data.test.size()
                << " train/dev/test examples over " << synth.classes << " classes to " << dir << '\n';
    } else if (*train_cmd) {
      auto cfg = train_flags.cfg;
      cfg.method = *parse_method(train_flags.method);
      auto data = load_dataset(train_flags.data, cfg.task == "task" ? "" : cfg.task);
      cfg.task = data.name;
      cfg.out_dir = resolve_out(train_flags.out, "runs");
      auto record = train<float>(cfg, data);
      print_run(record, cfg.out_dir);
      if (record.diverged) return kRuntimeError;
    } else if (*eval_cmd) {
      auto ckpt = load_checkpoint<float>(eval_ckpt);
      auto corpus = ingest_file(eval_input, Split::Test);
      for (const auto& bad : corpus.malformed)
        std::cerr << "warning: line " << bad.line << ": " << bad.reason << '\n';
      auto report = evaluate(ckpt.model, tokenize_for(ckpt, corpus.corpus), ckpt.classes.size());
      std::cout << "examples\t" << corpus.corpus.size() << "\nmacro_f1\t" << detail::percent(report.macro_f1)
                << "\naccuracy\t" << detail::percent(report.accuracy) << "\nclass\tprecision\trecall\tf1\tsupport\n";
      for (std::size_t c = 0; c < ckpt.classes.size(); ++c)
        std::cout << ckpt.classes[c] << '\t' << detail::percent(report.precision[c]) << '\t'
                  << detail::percent(report.recall[c]) << '\t' << detail::percent(report.f1[c]) << '\t'
                  << report.support[c] << '\n';
    } else if (*data_cmd) {
      auto cfg = data_flags.cfg;
      auto data = load_dataset(data_flags.data, cfg.task == "task" ? "" : cfg.task);
      cfg.task = data.name;
      cfg.out_dir = resolve_out(data_flags.out, "runs");
      const auto methods = parse_methods(data_methods);
      auto grid = data_efficiency_sweep<float>(cfg, data, methods, fractions);
      std::ostringstream tsv;
      write_data_efficiency_tsv(tsv, grid);
      write_or_print((fs::path(cfg.out_dir) / "data_efficiency.tsv").string(), tsv.str());
      std::cout << tsv.str();
    } else if (*batch_cmd) {
      auto cfg = batch_flags.cfg;
      auto data = load_dataset(batch_flags.data, cfg.task == "task" ? "" : cfg.task);
      cfg.task = data.name;
      cfg.out_dir = resolve_out(batch_flags.out, "runs");
      const auto methods = parse_methods(batch_methods);
      auto grid = batch_size_sweep<float>(cfg, data, methods, batch_sizes);
      std::ostringstream tsv;
      write_batch_size_tsv(tsv, grid);
      write_or_print((fs::path(cfg.out_dir) / "batch_size.tsv").string(), tsv.str());
      std::cout << tsv.str();
    } else if (*proj_cmd) {
      auto ckpt = load_checkpoint<float>(proj_ckpt);
      auto corpus = ingest_file(proj_input, Split::Dev);
      auto tok = tokenize_for(ckpt, corpus.corpus);
      auto reps = embed_cls(ckpt.model, tok.ids);
      auto projection = project_2d(reps, tok.labels);
      std::ostringstream csv;
      write_projection_csv(csv, projection, ckpt.classes);
      const auto path = proj_output.empty() ? (fs::path(resolve_out(proj_out, ".")) / "projection.csv").string()
                                            : proj_output;
      write_or_print(path, csv.str());
      std::cout << "cluster separation " << cluster_separation(reps, tok.labels) << '\n';
    } else if (*compare_cmd) {
      auto runs = collect_runs(compare_paths);
      std::ostringstream tsv;
      write_compare_tsv(tsv, build_compare_table(runs));
      write_or_print(compare_output, tsv.str());
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return 0;
}
