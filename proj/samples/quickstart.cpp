// Generates a small synthetic dataset, trains a compact model for a thousand
// steps, evaluates it and writes one colored prediction.
//
//   sample_quickstart [output-dir]

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "pavlm/pavlm.hpp"

namespace fs = std::filesystem;
using namespace pavlm;

int main(int argc, char** argv) {
  const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "pavlm_quickstart";
  try {
    SyntheticOptions data;
    data.n_objects = 12;
    data.n_points = 256;
    const Dataset ds = generate_synthetic_dataset(data, out / "data");
    const Splits splits = make_splits(ds.records, {});
    std::printf("%zu records: %zu train, %zu val, %zu test\n", ds.records.size(), splits.train.size(),
                splits.val.size(), splits.test.size());

    TrainConfig cfg;
    cfg.model_dim = 32;
    cfg.n_heads = 2;
    cfg.n_groups = 8;
    cfg.group_size = 32;
    cfg.out_dim = 32;
    cfg.joint = true;
    cfg.joint_steps = 1000;

    Model<float> model(cfg);
    GeometryCache<float> cache(ds, model.encoder_config());
    TrainOptions opt;
    opt.on_step = [](const StepLog& s) {
      if (s.step % 100 == 0) std::printf("step %4lld  loss %.4f\n", s.step, s.total);
    };
    const auto summary = train_model(model, prepare_samples(ds, splits.train, cache), opt);

    auto ckpt = make_checkpoint(model, summary.phase, summary.step);
    ckpt.vocabulary = ds.manifest.vocabulary.names();
    save_checkpoint(ckpt, out / "model.pavc");

    std::cout << "\ntest split\n" << evaluate(model, ds, splits.test, {}, &cache).table();

    const auto& r = splits.test.front();
    const auto res = infer(model, ds.load_cloud(r), r.instruct, ds.manifest.vocabulary);
    export_vis(ds.load_cloud(r).points, res.scores, out / "prediction.ply");
    std::printf("\n\"%s\" -> %s (truth %s)\nwrote %s\n", r.instruct.c_str(), res.label.name.c_str(),
                r.affordance.c_str(), (out / "prediction.ply").c_str());
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
