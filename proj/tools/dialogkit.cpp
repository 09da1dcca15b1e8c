// dialogkit: train, evaluate and serve the toy dialogue models.
//
//   dialogkit synth
//   dialogkit train --kind generator --out runs/generator
//   dialogkit selfchat --pairs 100 --turns 14
//   dialogkit serve --models '["gen=runs/generator"]'
//
// Every subcommand takes --config FILE (a JSON object) plus one flag per
// config key; flags win over the file. Unknown keys fail before any work.

#include <CLI11.hpp>

#include <algorithm>
#include <iostream>
#include <map>

#include "dialogkit/app/commands.hpp"

namespace {

struct Pending {
  CLI::App* sub = nullptr;
  std::string config;
  std::map<std::string, std::string> raw;  // flag values as given
  std::vector<std::string> order;
};

}  // namespace

int main(int argc, char** argv) {
  using namespace dialogkit::app;
  CLI::App app{"Dialogue model toolkit: corpora, training, decoding, evaluation and serving"};
  app.require_subcommand(1);
  app.set_version_flag("--version", code_version());

  std::map<std::string, Pending> pending;
  for (const auto& name : command_names()) {
    auto& p = pending[name];
    p.sub = app.add_subcommand(name, std::string(command_summary(name)));
    p.sub->add_option("--config", p.config, "JSON settings file")->check(CLI::ExistingFile);
    const auto defaults = command_defaults(name);
    for (const auto& [key, def] : defaults.items()) {
      std::string flags = "--" + key;
      if (key.find('_') != std::string::npos) {
        std::string dashed = key;
        std::replace(dashed.begin(), dashed.end(), '_', '-');
        flags += ",--" + dashed;
      }
      const std::string k = key;
      p.sub->add_option_function<std::string>(
               flags,
               [&p, k](const std::string& v) {
                 p.raw[k] = v;
                 p.order.push_back(k);
               },
               "default: " + def.dump())
          ->type_name(def.is_string() ? "TEXT" : def.is_number() ? "NUM" : def.is_boolean() ? "BOOL" : "JSON");
    }
  }

  CLI11_PARSE(app, argc, argv);

  for (auto& [name, p] : pending) {
    if (!p.sub->parsed()) continue;
    try {
      std::vector<std::pair<std::string, std::string>> flags;
      for (const auto& k : p.order) flags.emplace_back(k, p.raw[k]);
      const auto settings = resolve_settings(name, p.config, flags);
      const auto result = run_command(name, settings, std::cerr);
      std::cout << result.dump(2) << std::endl;
    } catch (const ConfigError& e) {
      std::cerr << "dialogkit " << name << ": configuration error: " << e.what() << std::endl;
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "dialogkit " << name << ": " << e.what() << std::endl;
      return 1;
    }
  }
  return 0;
}
