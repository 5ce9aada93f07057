#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "avc/errors.hpp"
#include "avc/experiment.hpp"

namespace {

std::string registered_names() {
  std::string names;
  for (const auto& info : avc::experiment_registry()) names += (names.empty() ? "" : ", ") + info.name;
  return names;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Averaging-correction policy-gradient lab"};
  app.set_version_flag("--version", avc::code_version());
  app.require_subcommand(1);

  auto* list = app.add_subcommand("list", "List registered experiments");

  std::string run_name, env, schemes, gammas, seeds, config, out;
  std::size_t steps = 0;
  std::vector<std::string> sets;
  auto* run = app.add_subcommand("run", "Run an experiment and write CSV artifacts");
  run->add_option("experiment", run_name, "One of: " + registered_names())->required();
  run->add_option("--env", env, "two_state, discrete_reacher or cartpole");
  run->add_option("--scheme", schemes, "Comma-separated weighting schemes");
  run->add_option("--gamma", gammas, "Comma-separated discount factors");
  run->add_option("--seed", seeds, "Comma-separated seeds or ranges such as 0-9");
  run->add_option("--steps", steps, "Updates (counterexample) or environment steps");
  run->add_option("--out", out, "Output directory");
  run->add_option("--config", config, "key=value config file")->check(CLI::ExistingFile);
  run->add_option("--set", sets, "Agent override key=value (repeatable)");

  std::string verify_name, in_dir;
  auto* verify = app.add_subcommand("verify", "Check artifacts against the acceptance thresholds");
  verify->add_option("experiment", verify_name, "One of: " + registered_names())->required();
  verify->add_option("--in", in_dir, "Directory written by run")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (list->parsed()) {
      for (const auto& info : avc::experiment_registry())
        std::cout << info.name << "\t" << info.anchor << "\t" << info.description << '\n';
      return 0;
    }
    if (run->parsed()) {
      avc::ExperimentSpec spec = avc::default_spec(run_name);
      spec.out = "out/" + run_name;
      if (!config.empty()) {
        std::ifstream in(config);
        avc::apply_config(spec, in);
      }
      if (!env.empty()) avc::apply_setting(spec, "env", env);
      if (!schemes.empty()) avc::apply_setting(spec, "schemes", schemes);
      if (!gammas.empty()) avc::apply_setting(spec, "gammas", gammas);
      if (!seeds.empty()) avc::apply_setting(spec, "seeds", seeds);
      if (run->count("--steps")) spec.steps = steps;
      if (!out.empty()) spec.out = out;
      for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw avc::UsageError("--set expects key=value, got '" + kv + "'");
        avc::apply_setting(spec, kv.substr(0, eq), kv.substr(eq + 1));
      }
      const avc::RunStatus status = avc::run(spec);
      std::cout << "wrote " << status.artifacts.size() << " artifacts to " << spec.out.string()
                << " (config " << avc::config_hash(spec) << ")\n";
      if (!status.ok) {
        std::cerr << "run failed: " << status.error << '\n';
        return 1;
      }
      return 0;
    }
    const nlohmann::json report = avc::verify(verify_name, in_dir);
    std::ofstream(std::filesystem::path(in_dir) / "verify.json") << report.dump(2) << '\n';
    std::cout << report.dump(2) << '\n';
    return report.at("passed").get<bool>() ? 0 : 1;
  } catch (const avc::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const avc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const avc::InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 2;
  }
}
