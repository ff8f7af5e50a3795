// pavlm: dataset generation, augmentation, training, evaluation and inference.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cli_config.hpp"
#include "pavlm/pavlm.hpp"
#include "pavlm/service_client.hpp"

namespace fs = std::filesystem;
using namespace pavlm;

namespace {

struct SplitArgs {
  std::string data;
  std::string split = "seen";
  std::string shape = "full";
  std::string subset = "test";
  std::vector<std::string> held_out;
  std::uint64_t split_seed = 0;
};

void add_split_options(CLI::App& app, SplitArgs& a, bool with_subset) {
  app.add_option("--data", a.data, "Dataset directory")->required();
  app.add_option("--split", a.split, "seen or unseen")->check(CLI::IsMember({"seen", "unseen"}))->capture_default_str();
  app.add_option("--shape", a.shape, "full, partial or all")
      ->check(CLI::IsMember({"full", "partial", "all"}))
      ->capture_default_str();
  app.add_option("--held-out", a.held_out, "Held-out categories for the unseen split (default: from the manifest)")
      ->delimiter(',');
  app.add_option("--split-seed", a.split_seed, "Shuffle seed for the 8:1:1 split")->capture_default_str();
  if (with_subset)
    app.add_option("--subset", a.subset, "train, val or test")
        ->check(CLI::IsMember({"train", "val", "test"}))
        ->capture_default_str();
}

Splits select_splits(const Dataset& ds, const SplitArgs& a) {
  auto records = ds.records;
  if (a.shape != "all") records = filter_shape(records, parse_shape_kind(a.shape));
  if (records.empty()) throw InvalidArgument("no " + a.shape + "-shape records in " + a.data);
  SplitSpec spec;
  spec.mode = parse_split_mode(a.split);
  spec.held_out_categories = a.held_out.empty() ? ds.manifest.held_out_categories : a.held_out;
  spec.shuffle_seed = a.split_seed;
  return make_splits(records, spec);
}

const std::vector<DatasetRecord>& pick(const Splits& s, const std::string& subset) {
  if (subset == "train") return s.train;
  if (subset == "val") return s.val;
  return s.test;
}

LabelVocabulary vocabulary_of(const Checkpoint& c) {
  return c.vocabulary.empty() ? LabelVocabulary(default_affordance_names()) : LabelVocabulary(c.vocabulary);
}

PointCloud load_any_cloud(const fs::path& path) {
  PointCloud pc;
  pc.points = path.extension() == ".ply" ? read_ply(path).points : read_point_cloud(path);
  pc.validate();
  return pc;
}

// ---------------------------------------------------------------- gen-data

struct GenArgs {
  std::string out;
  SyntheticOptions synth;
  std::string from;
  std::string vocab_file;
  std::map<std::string, std::string> rename;
  std::vector<std::string> held_out;
  bool no_normalize = false;
};

void add_gen(CLI::App& root, GenArgs& a) {
  auto* c = root.add_subcommand("gen-data", "Generate a synthetic dataset or ingest an external one");
  c->add_option("--out", a.out, "Output dataset directory")->required();
  c->add_option("--objects", a.synth.n_objects, "Number of synthetic objects")->capture_default_str();
  c->add_option("--points", a.synth.n_points, "Points per cloud")->capture_default_str();
  c->add_option("--seed", a.synth.seed, "Generator seed")->capture_default_str();
  c->add_option("--families", a.synth.families, "Object families")->delimiter(',')->capture_default_str();
  c->add_option("--partial-fraction", a.synth.partial_fraction, "Fraction of objects that also get a partial view")
      ->capture_default_str();
  c->add_option("--partial-keep", a.synth.partial_keep, "Fraction of points kept by a partial view")
      ->capture_default_str();
  c->add_flag("--random-yaw", a.synth.random_yaw, "Rotate each object by a random yaw");
  auto* from = c->add_option("--from", a.from, "Ingest an external dataset directory instead of generating");
  c->add_option("--vocab", a.vocab_file, "Vocabulary file (default: <from>/vocabulary.txt)")->needs(from);
  c->add_option("--rename", a.rename, "Label renames as source=target")->delimiter(',')->needs(from);
  c->add_option("--held-out", a.held_out, "Default held-out categories written to the manifest")
      ->delimiter(',')
      ->needs(from);
  c->add_flag("--no-normalize", a.no_normalize, "Keep external coordinates as they are")->needs(from);
  c->callback([&a] {
    Dataset ds;
    if (a.from.empty()) {
      ds = generate_synthetic_dataset(a.synth, a.out);
    } else {
      IngestOptions opt;
      if (!a.vocab_file.empty()) opt.vocabulary = read_vocabulary_file(a.vocab_file);
      opt.label_rename = a.rename;
      opt.held_out_categories = a.held_out;
      opt.normalize = !a.no_normalize;
      ds = ingest_external(a.from, opt, a.out);
    }
    std::size_t partial = 0;
    std::set<std::string> objects;
    for (const auto& r : ds.records) {
      partial += r.shape_kind == ShapeKind::partial ? 1 : 0;
      objects.insert(r.object_id);
    }
    std::cout << "wrote " << ds.records.size() << " records (" << partial << " partial) for " << objects.size()
              << " clouds to " << a.out << "\n";
  });
}

// ---------------------------------------------------------------- augment

struct AugmentArgs {
  std::string data;
  bool service = false;
  bool rule = false;
  int variants = 5;
  std::uint64_t seed = 0;
  std::string model;
};

void add_augment(CLI::App& root, AugmentArgs& a) {
  auto* c = root.add_subcommand("augment", "Add paraphrased instructions to a dataset's records");
  c->add_option("--data", a.data, "Dataset directory (records are rewritten in place)")->required();
  auto* svc = c->add_flag("--service", a.service, "Query the text-generation endpoint in PAVLM_LLM_ENDPOINT");
  auto* rule = c->add_flag("--rule", a.rule, "Use the deterministic offline paraphraser");
  svc->excludes(rule);
  c->add_option("--variants", a.variants, "Paraphrases per (object, affordance)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  c->add_option("--seed", a.seed, "Seed for --rule")->capture_default_str();
  c->add_option("--model", a.model, "Model name sent with --service requests (omitted when empty)");
  c->callback([&a] {
    if (a.service == a.rule) throw CLI::ValidationError("augment", "exactly one of --service or --rule is required");
    Dataset ds = load_dataset(a.data);
    const std::string source = a.service ? "service" : "rule";
    EndpointConfig endpoint = EndpointConfig::from_env();
    if (!a.model.empty()) endpoint.model = a.model;

    std::vector<DatasetRecord> kept;
    for (const auto& r : ds.records)
      if (r.source != source) kept.push_back(r);
    std::map<std::pair<std::string, std::string>, std::vector<InstructionRecord>> by_category;
    std::set<std::pair<std::string, std::string>> done;
    std::vector<DatasetRecord> added;
    int warnings = 0;
    std::uint64_t k = 0;
    for (const auto& base : kept) {
      if (base.source == "rule" || base.source == "service") continue;
      if (!done.insert({base.input, base.affordance}).second) continue;
      std::vector<InstructionRecord> variants;
      if (a.rule) {
        variants = rule_paraphrase(base.category, base.affordance, a.variants, a.seed + k++);
      } else {
        auto key = std::make_pair(base.category, base.affordance);
        auto it = by_category.find(key);
        if (it == by_category.end()) {
          auto res = augment_via_service(build_augmentation_prompt(base.category, base.affordance, a.variants), endpoint,
                                         base.category, base.affordance);
          warnings += res.warnings;
          it = by_category.emplace(key, std::move(res.records)).first;
        }
        variants = it->second;
      }
      for (const auto& v : variants) {
        DatasetRecord r = base;
        r.instruct = v.instruct_text;
        r.answer = v.answer_text;
        r.source = source;
        added.push_back(std::move(r));
      }
    }
    kept.insert(kept.end(), added.begin(), added.end());
    ds.records = std::move(kept);
    write_dataset(ds);
    std::cout << "added " << added.size() << " " << source << " records";
    if (warnings > 0) std::cout << " (" << warnings << " malformed items dropped)";
    std::cout << "; dataset now has " << ds.records.size() << " records\n";
  });
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  SplitArgs split;
  TrainConfig cfg;
  std::string out;
  bool eval = false;
};

template <class T>
void run_train(const TrainArgs& a) {
  const Dataset ds = load_dataset(a.split.data);
  const Splits splits = select_splits(ds, a.split);
  if (splits.train.empty()) throw InvalidArgument("the training split is empty");
  Model<T> model(a.cfg);
  GeometryCache<T> cache(ds, model.encoder_config());
  const auto samples = prepare_samples(ds, splits.train, cache);
  std::cout << "training on " << samples.size() << " records (" << a.split.split << ", " << a.split.shape
            << "), digest " << config_digest(a.cfg) << "\n";

  TrainOptions opt;
  if (a.cfg.log_every > 0) {
    opt.on_step = [&](const StepLog& s) {
      if (s.step % a.cfg.log_every != 0) return;
      std::printf("%-10s step %6lld  total %.5f", s.phase.c_str(), s.step, s.total);
      if (s.align) std::printf("  align %.5f", *s.align);
      if (s.label) std::printf("  label %.5f", *s.label);
      if (s.affordance) std::printf("  affordance %.5f", *s.affordance);
      std::printf("  |g| %.4f\n", s.grad_norm);
      std::fflush(stdout);
    };
  }
  const auto summary = train_model(model, samples, opt);

  std::map<std::string, double> snapshot;
  if (summary.initial_affordance_loss) snapshot["initial_affordance_loss"] = *summary.initial_affordance_loss;
  if (summary.final_affordance_loss) snapshot["final_affordance_loss"] = *summary.final_affordance_loss;
  auto ckpt = make_checkpoint(model, summary.phase, summary.step, snapshot);
  ckpt.vocabulary = ds.manifest.vocabulary.names();
  save_checkpoint(ckpt, a.out);
  std::cout << "saved " << a.out << " (phase " << summary.phase << ", step " << summary.step << ")\n";
  if (summary.final_affordance_loss) std::printf("final affordance loss %.5f\n", *summary.final_affordance_loss);

  if (a.eval) {
    const auto& test = splits.test;
    if (test.empty()) throw InvalidArgument("the test split is empty");
    std::cout << "\ntest split:\n" << evaluate(model, ds, test, {}, &cache).table();
  }
}

void add_train(CLI::App& root, TrainArgs& a) {
  auto* c = root.add_subcommand("train", "Train a model and write a checkpoint");
  add_split_options(*c, a.split, false);
  c->add_option("--out", a.out, "Checkpoint path")->required();
  c->add_flag("--eval", a.eval, "Evaluate on the test split after training");
  cli::bind_train_config(*c, a.cfg);
  c->callback([&a] {
    a.cfg.validate();
    if (a.cfg.precision == "float64")
      run_train<double>(a);
    else
      run_train<float>(a);
  });
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  SplitArgs split;
  std::string checkpoint;
  double gt_threshold = 0.5;
  std::string variant;
  std::string format = "table";
  std::string report;
};

template <class T>
void run_eval(const EvalArgs& a, const Checkpoint& ckpt) {
  const auto model = model_from_checkpoint<T>(ckpt);
  const Dataset ds = load_dataset(a.split.data);
  const Splits splits = select_splits(ds, a.split);
  const auto& records = pick(splits, a.split.subset);
  if (records.empty()) throw InvalidArgument("the " + a.split.subset + " split is empty");
  EvalOptions opt;
  opt.gt_threshold = a.gt_threshold;
  if (!a.variant.empty()) opt.variant = metrics::parse_prompt_variant(a.variant);
  const auto report = evaluate(*model, ds, records, opt);
  const std::string text = a.format == "kv" ? report.key_values() : report.table();
  std::cout << text;
  if (!a.report.empty()) io::write_file(a.report, text);
}

void add_eval(CLI::App& root, EvalArgs& a) {
  auto* c = root.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  c->add_option("--checkpoint", a.checkpoint, "Checkpoint path")->required()->check(CLI::ExistingFile);
  add_split_options(*c, a.split, true);
  c->add_option("--gt-threshold", a.gt_threshold, "Ground-truth binarization threshold")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  c->add_option("--variant", a.variant, "Prompt variant: hi, action, object_action, full_question, augmented");
  c->add_option("--format", a.format, "table or kv")->check(CLI::IsMember({"table", "kv"}))->capture_default_str();
  c->add_option("--report", a.report, "Also write the report to this file");
  c->callback([&a] {
    const auto ckpt = load_checkpoint(a.checkpoint);
    if (ckpt.config.precision == "float64")
      run_eval<double>(a, ckpt);
    else
      run_eval<float>(a, ckpt);
  });
}

// ---------------------------------------------------------------- infer

struct InferArgs {
  std::string checkpoint, cloud, instruct, out, scores;
};

template <class T>
Inference run_infer(const Checkpoint& ckpt, const PointCloud& pc, const std::string& instruct) {
  return infer(*model_from_checkpoint<T>(ckpt), pc, instruct, vocabulary_of(ckpt));
}

void add_infer(CLI::App& root, InferArgs& a) {
  auto* c = root.add_subcommand("infer", "Predict an affordance map for one cloud and instruction");
  c->add_option("--checkpoint", a.checkpoint, "Checkpoint path")->required()->check(CLI::ExistingFile);
  c->add_option("--cloud", a.cloud, "Point cloud (.pavl or .ply)")->required()->check(CLI::ExistingFile);
  c->add_option("--instruct", a.instruct, "Instruction text")->required();
  c->add_option("--out", a.out, "Colored PLY output")->required();
  c->add_option("--scores", a.scores, "Also write raw scores as a ground-truth file");
  c->callback([&a] {
    const auto ckpt = load_checkpoint(a.checkpoint);
    const PointCloud pc = normalize_unit_sphere(load_any_cloud(a.cloud));
    const auto res = ckpt.config.precision == "float64" ? run_infer<double>(ckpt, pc, a.instruct)
                                                        : run_infer<float>(ckpt, pc, a.instruct);
    if (res.warning) std::cerr << "warning: " << *res.warning << "\n";
    export_vis(pc.points, res.scores, a.out);
    if (!a.scores.empty()) {
      std::vector<float> f(res.scores.begin(), res.scores.end());
      write_ground_truth(f, a.scores);
    }
    double hi = 0.0;
    std::size_t above = 0;
    for (double s : res.scores) {
      hi = std::max(hi, s);
      above += s >= 0.5 ? 1 : 0;
    }
    std::printf("label %s (id %d)\npoints >= 0.5: %zu of %zu, max score %.4f\nwrote %s\n", res.label.name.c_str(),
                res.label.id, above, res.scores.size(), hi, a.out.c_str());
  });
}

// ---------------------------------------------------------------- export-vis

struct VisArgs {
  std::string data;
  long long record = -1;
  std::string cloud, scores, out;
};

void add_export(CLI::App& root, VisArgs& a) {
  auto* c = root.add_subcommand("export-vis", "Write a colored PLY for a ground-truth or score file");
  auto* data = c->add_option("--data", a.data, "Dataset directory");
  auto* rec = c->add_option("--record", a.record, "Record index (0-based) whose ground truth is exported")->needs(data);
  auto* cloud = c->add_option("--cloud", a.cloud, "Point cloud (.pavl or .ply)")->check(CLI::ExistingFile);
  auto* scores = c->add_option("--scores", a.scores, "Score file (PAVG layout)")->check(CLI::ExistingFile);
  cloud->needs(scores)->excludes(data);
  scores->needs(cloud);
  data->needs(rec);
  c->add_option("--out", a.out, "PLY output")->required();
  c->callback([&a] {
    Matrix<double> points;
    std::vector<double> s;
    if (!a.data.empty()) {
      const Dataset ds = load_dataset(a.data);
      if (a.record < 0 || a.record >= static_cast<long long>(ds.records.size()))
        throw InvalidArgument("record index out of range: " + std::to_string(a.record));
      const auto& r = ds.records[static_cast<std::size_t>(a.record)];
      points = ds.load_cloud(r).points;
      const auto gt = ds.load_ground_truth(r);
      s.assign(gt.scores.begin(), gt.scores.end());
      std::cout << r.object_id << " / " << r.affordance << "\n";
    } else if (!a.cloud.empty()) {
      points = load_any_cloud(a.cloud).points;
      const auto gt = read_ground_truth(a.scores);
      s.assign(gt.scores.begin(), gt.scores.end());
    } else {
      throw CLI::ValidationError("export-vis", "give --data with --record, or --cloud with --scores");
    }
    export_vis(points, s, a.out);
    std::cout << "wrote " << a.out << "\n";
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instruction-conditioned point-cloud affordance toolkit"};
  app.require_subcommand(1);
  GenArgs gen;
  AugmentArgs aug;
  TrainArgs train;
  EvalArgs eval;
  InferArgs inf;
  VisArgs vis;
  add_gen(app, gen);
  add_augment(app, aug);
  add_train(app, train);
  add_eval(app, eval);
  add_infer(app, inf);
  add_export(app, vis);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const ConfigMismatchError& e) {
    std::cerr << "config mismatch: " << e.what() << "\n";
    return 3;
  } catch (const ServiceError& e) {
    std::cerr << "service error: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
