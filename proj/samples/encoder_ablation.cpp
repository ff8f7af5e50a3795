// Trains the geometric encoder and the plain point transformer on the same
// synthetic split and prints their test metrics side by side.
//
//   sample_encoder_ablation [steps] [seeds]

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "pavlm/pavlm.hpp"

using namespace pavlm;

int main(int argc, char** argv) {
  const long long steps = argc > 1 ? std::atoll(argv[1]) : 1000;
  const int seeds = argc > 2 ? std::atoi(argv[2]) : 1;
  const auto root = std::filesystem::temp_directory_path() / "pavlm_encoder_ablation";
  try {
    const Dataset ds = generate_synthetic_dataset({}, root);
    const Splits splits = make_splits(ds.records, {});
    std::printf("%-10s %4s %7s %7s %7s %7s\n", "encoder", "seed", "mAP", "AUC", "aIoU", "MSE");
    for (const char* encoder : {"baseline", "geometric"}) {
      for (int seed = 0; seed < seeds; ++seed) {
        TrainConfig cfg;
        cfg.encoder = encoder;
        cfg.seed = seed;
        cfg.joint = true;
        cfg.joint_steps = steps;
        Model<float> model(cfg);
        GeometryCache<float> cache(ds, model.encoder_config());
        train_model(model, prepare_samples(ds, splits.train, cache));
        const auto r = evaluate(model, ds, splits.test, {}, &cache);
        using R = metrics::MetricsReport;
        std::printf("%-10s %4d %7.1f %7.1f %7.1f %7.1f\n", encoder, seed, R::scaled(r.map.value_or(0)),
                    R::scaled(r.mean_auc.value_or(0)), R::scaled(r.mean_aiou.value_or(0)), R::scaled(r.mse_sum));
        std::fflush(stdout);
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::filesystem::remove_all(root);
  return 0;
}
