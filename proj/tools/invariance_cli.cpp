// Command-line entry point: attacks, synthetic checks, training, evaluation
// and the annotation server.

#include <pthread.h>
#include <signal.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include "invariance/attack.hpp"
#include "invariance/dataset_io.hpp"
#include "invariance/mlp.hpp"
#include "invariance/robust.hpp"
#include "invariance/synthetic.hpp"
// httplib last (see http_api.hpp)
#include "invariance/http_api.hpp"

#include <CLI11.hpp>

namespace fs = std::filesystem;
using namespace invariance;

namespace {

enum Exit { kOk = 0, kUsage = 1, kRuntime = 2, kCheckFailed = 3 };

struct Common {
  std::uint64_t seed = 0;
  std::string out = "out";
  unsigned threads = 1;
};

struct DataPaths {
  std::string dir;
  std::string train_images, train_labels, test_images, test_labels;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--data-dir", dir, "Directory with the four MNIST IDX files");
    cmd->add_option("--train-images", train_images);
    cmd->add_option("--train-labels", train_labels);
    cmd->add_option("--test-images", test_images);
    cmd->add_option("--test-labels", test_labels);
  }

  std::string base() const {
    if (!dir.empty()) return dir;
    if (const char* env = std::getenv("INVARIANCE_DATA_DIR")) return env;
    return "data";
  }
  fs::path pick(const std::string& explicit_path, const char* name) const {
    return explicit_path.empty() ? fs::path(base()) / name : fs::path(explicit_path);
  }
  Dataset train() const {
    return load_idx_dataset(pick(train_images, "train-images-idx3-ubyte"), pick(train_labels, "train-labels-idx1-ubyte"));
  }
  Dataset test() const {
    return load_idx_dataset(pick(test_images, "t10k-images-idx3-ubyte"), pick(test_labels, "t10k-labels-idx1-ubyte"));
  }
};

std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

fs::path prepare_out(const Common& c) {
  fs::create_directories(c.out);
  return c.out;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write " + p.string());
  out << text;
}

Dataset subset(const Dataset& ds, std::size_t n) { return n == 0 || n >= ds.size() ? ds : ds.head(n); }

// attack -------------------------------------------------------------------

struct AttackArgs {
  std::string norm = "l0";
  double eps = -1.0;
  std::size_t count = 100;
  std::size_t shortlist = 20;
  std::string grid = "full";
};

int run_attack(const Common& c, const DataPaths& data, const AttackArgs& a) {
  AttackConfig cfg = parse_attack_norm(a.norm) == AttackNorm::L0 ? AttackConfig::l0() : AttackConfig::linf(0.4);
  if (a.eps >= 0.0) cfg.epsilon = a.eps;
  cfg.donor_shortlist = a.shortlist;
  cfg.threads = c.threads;
  if (a.grid == "shifts")
    cfg.grid = TransformGrid::shifts_only(6, 1);
  else if (a.grid == "identity")
    cfg.grid = TransformGrid::identity_only();
  else if (a.grid != "full")
    fail(ErrorCode::InvalidParams, "grid must be full, shifts or identity");
  cfg.validate();
  const auto grid = enumerate_grid(cfg.grid);

  const auto train = data.train();
  const auto test = data.test();
  const auto out = prepare_out(c);
  const std::string tag = to_string(cfg.norm) + "_eps" + fmt_num(cfg.epsilon);

  const Dataset donors = a.count > 0 ? prepare_donor_set(train, cfg) : train;
  std::vector<InvarianceExample> examples;
  std::vector<GalleryEntry> gallery;
  std::ostringstream log;
  for (auto pos : seeded_sample(test.size(), a.count, c.seed)) {
    const auto t0 = std::chrono::steady_clock::now();
    auto ex = gen_inv(test[pos], donors, cfg, grid);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << provenance_line(ex, wall) << '\n';
    std::cerr << "[" << examples.size() + 1 << "/" << a.count << "] source " << ex.source.index << " -> donor "
              << ex.donor_index << " (label " << ex.donor_label << ") l0=" << ex.l0_distortion
              << " linf=" << ex.linf_distortion << '\n';
    gallery.push_back(to_gallery_entry(ex));
    examples.push_back(std::move(ex));
  }
  const auto s = summarize(examples);
  nlohmann::json summary = {{"norm", to_string(cfg.norm)}, {"epsilon", cfg.epsilon},    {"count", s.count},
                            {"mean_l0", s.mean_l0},         {"median_l0", s.median_l0}, {"mean_linf", s.mean_linf},
                            {"full_budget", s.full_budget}, {"admissible", s.admissible}, {"seed", c.seed}};
  write_text(out / ("gallery_" + tag + ".json"), write_gallery_json(gallery));
  write_text(out / ("provenance_" + tag + ".log"), log.str());
  write_text(out / ("summary_" + tag + ".json"), summary.dump(1) + "\n");
  std::cout << summary.dump() << '\n';
  return kOk;
}

// synthetic-verify ---------------------------------------------------------

int run_synthetic(const Common& c, const synthetic::SyntheticParams& p, std::size_t n) {
  p.validate();
  const auto rep = synthetic::verify(p, n, c.seed);
  const auto out = prepare_out(c);
  std::ostringstream csv;
  csv << synthetic::csv_header() << '\n';
  for (const auto& r : rep.rows) csv << synthetic::csv_row(r, c.seed) << '\n';
  write_text(out / "synthetic.csv", csv.str());
  for (const auto& chk : rep.checks) std::cout << (chk.pass ? "PASS " : "FAIL ") << chk.name << ": " << chk.detail << '\n';
  return rep.all_pass() ? kOk : kCheckFailed;
}

// train / eval -------------------------------------------------------------

struct TrainArgs {
  std::vector<double> eps{0.0, 0.1, 0.2, 0.3};
  int epochs = 10;
  int pgd_steps = 40;
  int batch = 100;
  int warm_step_epochs = 5;
  bool warm_start = true;
  std::size_t train_size = 10000;
  std::size_t test_size = 2000;
  std::vector<double> eps_eval{0.1, 0.2, 0.3};
  int eval_steps = 40;
};

std::string checkpoint_name(double eps) { return "model_eps" + fmt_num(eps) + ".ivat"; }

std::string robust_csv_header() { return "model,eps_eval,clean_error,robust_error,n,attack"; }

std::string robust_csv_rows(const std::string& model, const std::vector<RobustErrorReport>& reps) {
  std::ostringstream os;
  for (const auto& r : reps)
    os << model << ',' << r.eps_eval << ',' << r.clean_error << ',' << r.robust_error << ',' << r.n << ",\""
       << r.attack << "\"\n";
  return os.str();
}

/// True when `v` is non-decreasing (or non-increasing) with at most
/// `allowed` adjacent inversions.
bool monotone(const std::vector<double>& v, bool increasing, int allowed) {
  int inversions = 0;
  for (std::size_t i = 1; i < v.size(); ++i) inversions += increasing ? v[i] < v[i - 1] : v[i] > v[i - 1];
  return inversions <= allowed;
}

int run_train(const Common& c, const DataPaths& data, const TrainArgs& a) {
  std::vector<TrainConfig> cfgs;
  for (double e : a.eps) {
    TrainConfig t;
    t.eps_train = e;
    t.epochs = a.epochs;
    t.pgd_steps = a.pgd_steps;
    t.batch_size = a.batch;
    t.warm_start = a.warm_start;
    t.warm_step_epochs = a.warm_step_epochs;
    t.seed = c.seed;
    t.validate();
    cfgs.push_back(t);
  }
  const auto train = subset(data.train(), a.train_size);
  const auto test = subset(data.test(), a.test_size);
  const auto out = prepare_out(c);
  std::ostringstream log, robust;
  log << "eps_train,epoch,eps,lr,mean_loss,train_error\n";
  robust << robust_csv_header() << '\n';
  std::vector<double> trend;
  for (const auto& t : cfgs) {
    const auto model = adversarial_train(train, t, [&](const EpochStats& s) {
      log << t.eps_train << ',' << s.epoch << ',' << s.eps << ',' << s.lr << ',' << s.mean_loss << ','
          << s.train_error << '\n';
      std::cerr << "eps_train=" << t.eps_train << " epoch " << s.epoch << " eps=" << s.eps << " loss=" << s.mean_loss
                << " err=" << s.train_error << '\n';
    });
    const auto name = checkpoint_name(t.eps_train);
    save_checkpoint(out / name, model);
    const auto reps = robust_error_sweep(model, test, a.eps_eval, EvalAttack{a.eval_steps, c.seed});
    robust << robust_csv_rows(name, reps);
    trend.push_back(reps.back().robust_error);
  }
  write_text(out / "train_log.csv", log.str());
  write_text(out / "robust_error.csv", robust.str());
  const bool ok = monotone(trend, false, 1);
  std::cout << "robust error at eps_eval=" << a.eps_eval.back() << " non-increasing in eps_train: "
            << (ok ? "true" : "false") << '\n';
  return kOk;
}

int run_eval(const Common& c, const DataPaths& data, const std::vector<std::string>& checkpoints,
             const std::vector<double>& eps_eval, std::size_t test_size, int steps) {
  if (checkpoints.empty()) fail(ErrorCode::InvalidParams, "at least one --checkpoint is required");
  const auto test = subset(data.test(), test_size);
  const auto out = prepare_out(c);
  std::ostringstream robust;
  robust << robust_csv_header() << '\n';
  for (const auto& path : checkpoints) {
    const auto model = load_checkpoint<float>(path);
    robust << robust_csv_rows(fs::path(path).filename().string(),
                              robust_error_sweep(model, test, eps_eval, EvalAttack{steps, c.seed}));
  }
  write_text(out / "robust_error.csv", robust.str());
  std::cout << robust.str();
  return kOk;
}

std::optional<double> eps_from_name(const std::string& path) {
  static const std::regex re(R"(eps([0-9]*\.?[0-9]+))");
  std::smatch m;
  const auto name = fs::path(path).filename().string();
  if (std::regex_search(name, m, re)) return std::stod(m[1]);
  return std::nullopt;
}

int run_invariance_eval(const Common& c, const std::vector<std::string>& checkpoints, const std::string& gallery_path,
                        std::vector<double> eps_train) {
  if (checkpoints.empty()) fail(ErrorCode::InvalidParams, "at least one --checkpoint is required");
  if (!eps_train.empty() && eps_train.size() != checkpoints.size())
    fail(ErrorCode::InvalidParams, "--eps-train needs one value per checkpoint");
  std::ifstream in(gallery_path);
  if (!in) fail(ErrorCode::Io, "cannot read gallery " + gallery_path);
  std::stringstream ss;
  ss << in.rdbuf();
  const auto gallery = parse_gallery_json(ss.str());
  if (gallery.empty()) fail(ErrorCode::EmptyInput, "gallery is empty");
  if (eps_train.empty())
    for (const auto& p : checkpoints) eps_train.push_back(eps_from_name(p).value_or(std::nan("")));

  std::vector<std::pair<double, double>> rows;
  std::ostringstream csv;
  csv << "model,eps_train,invariance_rate\n";
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const auto model = load_checkpoint<float>(checkpoints[i]);
    if (model.input_size() != gallery.front().width * gallery.front().height)
      fail(ErrorCode::DimensionMismatch, "model input size does not match the gallery images");
    const double rate = invariance_rate(model, std::span<const GalleryEntry>(gallery));
    csv << fs::path(checkpoints[i]).filename().string() << ',' << eps_train[i] << ',' << rate << '\n';
    rows.emplace_back(eps_train[i], rate);
  }
  std::stable_sort(rows.begin(), rows.end());
  std::vector<double> rates;
  for (const auto& r : rows) rates.push_back(r.second);
  const bool trend = monotone(rates, true, 1);
  csv << "# monotone_trend=" << (trend ? "true" : "false") << '\n';
  write_text(prepare_out(c) / "invariance_rate.csv", csv.str());
  std::cout << csv.str();
  return kOk;
}

// serve --------------------------------------------------------------------

int run_serve(const DataPaths& data, const std::string& host, int port, const std::string& state_dir,
              const std::string& gallery_path) {
  std::vector<GalleryEntry> automated;
  if (!gallery_path.empty()) {
    std::ifstream in(gallery_path);
    if (!in) fail(ErrorCode::Io, "cannot read gallery " + gallery_path);
    std::stringstream ss;
    ss << in.rdbuf();
    automated = parse_gallery_json(ss.str());
  }
  annotation::AnnotationStore store(data.test(), state_dir, std::move(automated));

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  httplib::Server server;
  annotation::register_routes(server, store);
  // SO_REUSEADDR only, so a port held by another server fails to bind.
  server.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof yes);
  });
  if (!server.bind_to_port(host, port)) {
    std::cerr << "error: cannot listen on " << host << ":" << port << '\n';
    return kRuntime;
  }
  std::thread listener([&] { server.listen_after_bind(); });
  std::cout << "listening on " << host << ":" << port << std::endl;
  int sig = 0;
  sigwait(&signals, &sig);
  server.stop();
  listener.join();
  std::cout << "shutdown (signal " << sig << ")" << std::endl;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Invariance-based adversarial examples: attacks, synthetic checks, training and annotation"};
  app.set_config("--config", "", "key=value file; [section] names match subcommands; flags override");
  app.require_subcommand(1);
  Common common;
  app.add_option("--seed", common.seed, "Global seed");
  app.add_option("--out", common.out, "Output directory");
  app.add_option("--threads", common.threads, "Worker threads")->check(CLI::Range(1u, 256u));
  DataPaths data;

  AttackArgs attack;
  auto* cmd_attack = app.add_subcommand("attack", "Generate invariance examples for seeded-random test inputs");
  data.add_to(cmd_attack);
  cmd_attack->add_option("--norm", attack.norm)->check(CLI::IsMember({"l0", "linf"}));
  cmd_attack->add_option("--eps", attack.eps, "Budget (pixels for l0, intensity for linf)");
  cmd_attack->add_option("--count", attack.count);
  cmd_attack->add_option("--shortlist", attack.shortlist, "Donors searched over the grid (0 = all)");
  cmd_attack->add_option("--grid", attack.grid)->check(CLI::IsMember({"full", "shifts", "identity"}));

  synthetic::SyntheticParams sp;
  std::size_t syn_n = 100000;
  auto* cmd_syn = app.add_subcommand("synthetic-verify", "Monte-Carlo checks on the synthetic task");
  cmd_syn->add_option("--d", sp.d);
  cmd_syn->add_option("--k", sp.k);
  cmd_syn->add_option("--alpha", sp.alpha);
  cmd_syn->add_option("--delta", sp.delta);
  cmd_syn->add_option("--n", syn_n);

  TrainArgs train;
  auto* cmd_train = app.add_subcommand("train", "Adversarially train one model per eps");
  data.add_to(cmd_train);
  cmd_train->add_option("--eps", train.eps)->delimiter(',');
  cmd_train->add_option("--epochs", train.epochs);
  cmd_train->add_option("--pgd-steps", train.pgd_steps);
  cmd_train->add_option("--batch", train.batch);
  cmd_train->add_option("--warm-step-epochs", train.warm_step_epochs);
  cmd_train->add_flag("!--no-warm-start", train.warm_start);
  cmd_train->add_option("--train-size", train.train_size);
  cmd_train->add_option("--test-size", train.test_size);
  cmd_train->add_option("--eps-eval", train.eps_eval)->delimiter(',');
  cmd_train->add_option("--eval-steps", train.eval_steps);

  std::vector<std::string> checkpoints;
  std::vector<double> eps_eval{0.0, 0.1, 0.2, 0.3};
  std::size_t eval_test_size = 2000;
  int eval_steps = 40;
  auto* cmd_eval = app.add_subcommand("eval", "Robust error of saved checkpoints");
  data.add_to(cmd_eval);
  cmd_eval->add_option("--checkpoint", checkpoints)->required();
  cmd_eval->add_option("--eps-eval", eps_eval)->delimiter(',');
  cmd_eval->add_option("--test-size", eval_test_size);
  cmd_eval->add_option("--steps", eval_steps);

  std::string gallery;
  std::vector<double> eps_train;
  auto* cmd_inv = app.add_subcommand("invariance-eval", "Invariance rate of checkpoints on a gallery");
  cmd_inv->add_option("--checkpoint", checkpoints)->required();
  cmd_inv->add_option("--gallery", gallery)->required();
  cmd_inv->add_option("--eps-train", eps_train)->delimiter(',');

  std::string host = "127.0.0.1", state_dir = "annotation_state";
  int port = 8080;
  auto* cmd_serve = app.add_subcommand("serve", "Run the annotation HTTP service until SIGINT/SIGTERM");
  data.add_to(cmd_serve);
  cmd_serve->add_option("--host", host);
  cmd_serve->add_option("--port", port)->check(CLI::Range(0, 65535));
  cmd_serve->add_option("--state-dir", state_dir);
  cmd_serve->add_option("--gallery", gallery, "Automated gallery to offer for labeling");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (cmd_attack->parsed()) return run_attack(common, data, attack);
    if (cmd_syn->parsed()) return run_synthetic(common, sp, syn_n);
    if (cmd_train->parsed()) return run_train(common, data, train);
    if (cmd_eval->parsed()) return run_eval(common, data, checkpoints, eps_eval, eval_test_size, eval_steps);
    if (cmd_inv->parsed()) return run_invariance_eval(common, checkpoints, gallery, eps_train);
    if (cmd_serve->parsed()) return run_serve(data, host, port, state_dir, gallery);
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << '\n';
    return e.code() == ErrorCode::InvalidParams ? kUsage : kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
