#pragma once

// Binds every TrainConfig field to a --<field> option plus a --config file on a
// CLI11 subcommand. Values given on the command line win over the file.
// CLI11 only reads config files for the root app, so the file is applied here
// once the subcommand has parsed (callback() stays free for the command).

#include <memory>
#include <string>

#include <CLI11.hpp>

#include "pavlm/training.hpp"

namespace pavlm::cli {

inline void apply_config_file(CLI::App& app, const std::string& path) {
  if (CLI::detail::check_path(path.c_str()) != CLI::detail::path_type::file) throw CLI::FileError::Missing(path);
  CLI::ConfigTOML reader;
  for (const auto& item : reader.from_file(path)) {
    if (!item.parents.empty()) throw CLI::ConfigError::Extras(item.fullname());
    CLI::Option* opt = app.get_option_no_throw("--" + item.name);
    if (opt == nullptr || item.name == "config") throw CLI::ConfigError::Extras(item.name);
    if (opt->count() > 0) continue;
    opt->add_result(item.inputs);
    opt->run_callback();
  }
}

inline void bind_train_config(CLI::App& app, TrainConfig& cfg) {
  auto path = std::make_shared<std::string>();
  app.add_option("--config", *path, "TrainConfig file, one `field = value` per line");
  visit_fields(cfg, [&](const char* name, auto& field) {
    app.add_option(std::string("--") + name, field, std::string("TrainConfig.") + name)->capture_default_str();
  });
  app.parse_complete_callback([&app, path] {
    if (!path->empty()) apply_config_file(app, *path);
  });
}

}  // namespace pavlm::cli
