// zdtc: generate -> train -> calibrate -> eval -> bench over a work directory.
#include "zdtc/error.hpp"
#include "zdtc/pipeline.hpp"

#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>

#include <CLI11.hpp>

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-day traffic classification: train classifiers and open-set detectors on flow logs"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "flat key=value config file");
  app.add_option("-s,--set", overrides, "override one config key (key=value), repeatable");

  using Command = std::function<void(const zdtc::RunConfig&, std::ostream&)>;
  const std::vector<std::pair<std::string, Command>> stages{
      {"generate", zdtc::cmd_generate}, {"train", zdtc::cmd_train}, {"calibrate", zdtc::cmd_calibrate},
      {"eval", zdtc::cmd_eval},         {"bench", zdtc::cmd_bench}};
  std::map<std::string, std::string> help{
      {"generate", "write synthetic train/test_known/test_unknown flow logs and a manifest"},
      {"train", "train the CNN and/or GBT classifiers per protocol profile"},
      {"calibrate", "fit detector banks and thresholds on held-out known flows"},
      {"eval", "score test flows; write ROC curves, fixed-tuning and unknown-level reports"},
      {"bench", "time per-sample detector scoring"}};
  for (const auto& [name, fn] : stages) {
    app.add_subcommand(name, help[name])->fallthrough();
  }
  app.add_subcommand("run", "generate, train, calibrate and eval in sequence")->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    zdtc::KeyValueConfig kv = config_path.empty() ? zdtc::KeyValueConfig{} : zdtc::KeyValueConfig::load(config_path);
    for (const auto& o : overrides) kv.apply_override(o);
    const auto cfg = zdtc::RunConfig::from_config(kv, std::getenv("ZDTC_SEED"));

    const std::string chosen = app.get_subcommands().front()->get_name();
    for (const auto& [name, fn] : stages) {
      if (chosen == name || (chosen == "run" && name != "bench")) fn(cfg, std::cout);
    }
  } catch (const zdtc::UsageError& e) {
    std::cerr << "zdtc: usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "zdtc: error: " << e.what() << '\n';
    return kExitData;
  }
  return 0;
}
