// serl: train / eval / compare / inspect / oracle-checkpoint

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "serl/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(serl::detail::parse_number<std::uint64_t>(item));
  }
  if (out.empty()) throw std::invalid_argument("--seeds: expected a comma-separated list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective environment-reweighted learning on toy multi-turn environments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, algo = "serl", env, sources, placement, resume;
  std::uint64_t seed = 0;
  auto* train = app.add_subcommand("train", "run a training job");
  train->add_option("--config", config_path, "config file")->required();
  auto* seed_opt = train->add_option("--seed", seed, "overrides the config seed");
  train->add_option("--out", out_dir, "output directory");
  train->add_option("--algo", algo, "serl or grpo (alpha_init = lambda_init = 0)")->check(CLI::IsMember({"serl", "grpo"}));
  train->add_option("--env", env, "keydoor or minishop");
  train->add_option("--sources", sources, "comma set of immediate,next_obs,future,success,current");
  train->add_option("--placement", placement, "step or anchor");
  train->add_option("--resume", resume, "checkpoint to continue from");

  std::string checkpoint, eval_env;
  int episodes = 0;
  auto* eval = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--env", eval_env)->required();
  eval->add_option("--episodes", episodes)->required();

  std::string compare_config, seeds_csv;
  auto* compare = app.add_subcommand("compare", "GRPO vs SERL over several seeds");
  compare->add_option("--config", compare_config)->required();
  compare->add_option("--seeds", seeds_csv)->required();

  std::string traj_path;
  auto* inspect = app.add_subcommand("inspect", "pretty-print a trajectory dump");
  inspect->add_option("--trajectories", traj_path)->required();

  std::string oracle_env = "keydoor", oracle_out;
  auto* oracle_ck = app.add_subcommand("oracle-checkpoint", "write a checkpoint distilled from the brute-force solver");
  oracle_ck->add_option("--env", oracle_env);
  oracle_ck->add_option("--out", oracle_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  serl::RunSettings settings;
  try {
    if (*train) {
      settings = serl::parse_config(config_path);
      if (*seed_opt) settings.train.seed = seed;
      if (!out_dir.empty()) settings.out_dir = out_dir;
      if (!env.empty()) settings.env = serl::parse_env(env);
      if (!sources.empty()) settings.train.feedback_sources = serl::parse_sources(sources);
      if (!placement.empty()) settings.train.placement_mode = serl::parse_placement(placement);
      if (algo == "grpo") settings = serl::as_grpo(settings);
      serl::validate_settings(settings);
    } else if (*compare) {
      settings = serl::parse_config(compare_config);
    } else if (*eval) {
      if (episodes < 1) throw std::invalid_argument("--episodes must be >= 1");
      serl::parse_env(eval_env);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }

  try {
    if (*train) {
      serl::TrainOptions opts;
      if (!resume.empty()) opts.resume = resume;
      auto out = serl::run_training(settings, opts);
      std::cout << serl::Json{{"final_step", out.final_step},
                              {"success_rate", out.final_eval.success_rate},
                              {"mean_reward", out.final_eval.mean_reward},
                              {"episodes", out.final_eval.episodes}}
                       .dump()
                << '\n';
    } else if (*eval) {
      auto r = serl::run_checkpoint_eval(checkpoint, serl::parse_env(eval_env), episodes);
      std::cout << serl::Json{{"success_rate", r.success_rate}, {"mean_reward", r.mean_reward}, {"episodes", r.episodes}}.dump()
                << '\n';
    } else if (*compare) {
      std::vector<std::uint64_t> seeds;
      try {
        seeds = parse_seed_list(seeds_csv);
      } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
      }
      serl::run_compare(settings, seeds);
      std::ifstream summary(std::filesystem::path(settings.out_dir) / "compare_summary.json");
      std::cout << summary.rdbuf();
    } else if (*inspect) {
      std::ifstream in(traj_path);
      if (!in) throw std::runtime_error("cannot read '" + traj_path + "'");
      serl::print_trajectories(in, std::cout);
    } else if (*oracle_ck) {
      auto kind = serl::parse_env(oracle_env);
      serl::TrainConfig config;
      auto params = serl::oracle_policy(kind, config);
      std::ofstream f(oracle_out);
      serl::write_checkpoint(f, params, 0, serl::make_vocabulary(kind));
      if (!f) throw std::runtime_error("cannot write '" + oracle_out + "'");
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitOk;
}
