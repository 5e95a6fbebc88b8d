#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "htapcc/dsg.hpp"
#include "htapcc/fuzz.hpp"
#include "htapcc/history.hpp"
#include "htapcc/inspect.hpp"
#include "htapcc/workload.hpp"

using namespace htapcc;

namespace {

constexpr int kUsageError = 1;

History load_history(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_history(buf.str());
}

int cmd_check(const std::string& path) {
  const auto h = load_history(path);
  const auto report = classify_anomaly(committed_projection(h, h.full()));
  std::cout << to_json(report) << '\n';
  return report.exit_code();
}

int cmd_rss(const std::string& path, const std::string& at) {
  const auto h = load_history(path);
  const auto dump = rss_dump(h, parse_prefix(h, at));
  std::cout << to_json(dump) << '\n';
  return dump.verified ? 0 : kUsageError;
}

struct FuzzArgs {
  std::uint64_t seed = 1;
  std::size_t txns = 8;
  std::size_t keys = 4;
  std::uint64_t iters = 1000;
  std::string mode = "SSI";
  std::string counterexample;
};

int cmd_fuzz(const FuzzArgs& a) {
  FuzzConfig cfg;
  cfg.seed = a.seed;
  cfg.max_txns = a.txns;
  cfg.keys = a.keys;
  cfg.iterations = a.iters;
  cfg.mode = a.mode == "SI" ? IsolationMode::SI : IsolationMode::SSI;
  const auto summary = run_fuzz(cfg);
  std::cout << to_json(summary) << '\n';
  if (summary.counterexample && !a.counterexample.empty()) {
    std::ofstream(a.counterexample) << *summary.counterexample;
  }
  return cfg.mode == IsolationMode::SSI && summary.violations > 0 ? 2 : 0;
}

struct BenchArgs {
  std::vector<std::string> modes{"SSI", "SSI_SAFESNAP", "SSI_RSS"};
  std::vector<std::size_t> oltp{8};
  std::size_t olap = 4;
  double duration = 10;
  double warmup = 1;
  std::uint64_t seed = 1;
  std::size_t reps = 1;
  bool replicated = false;
  long latency_ms = 0;
  bool csv = false;
  std::string plot_dir;
  WorkloadSpec mix;
  long statement_latency_us = 100;
};

// One file per metric: rows are client counts, columns are modes.
void write_plot(const std::filesystem::path& dir, const std::vector<RunReport>& runs) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> labels;
  std::map<std::size_t, std::map<std::string, std::vector<const RunReport*>>> grid;
  for (const auto& r : runs) {
    const auto label = to_string(r.spec.mode, r.spec.replicated);
    if (std::find(labels.begin(), labels.end(), label) == labels.end()) labels.push_back(label);
    grid[r.spec.oltp_clients][label].push_back(&r);
  }
  const std::vector<std::pair<std::string, double (*)(const RunReport&)>> metrics{
      {"oltp_tps", [](const RunReport& r) { return r.oltp_tps; }},
      {"olap_qph", [](const RunReport& r) { return r.olap_qph; }},
      {"abort_rate", [](const RunReport& r) { return r.abort_rate; }},
      {"freshness_ms", [](const RunReport& r) { return r.freshness_ms; }},
  };
  for (const auto& [name, get] : metrics) {
    std::ofstream out(dir / (name + ".dat"));
    out << "# oltpClients";
    for (const auto& l : labels) out << ' ' << l;
    out << '\n';
    for (const auto& [clients, by_mode] : grid) {
      out << clients;
      for (const auto& l : labels) {
        const auto it = by_mode.find(l);
        if (it == by_mode.end()) {
          out << " NaN";
          continue;
        }
        double sum = 0;
        for (const auto* r : it->second) sum += get(*r);
        out << ' ' << sum / static_cast<double>(it->second.size());
      }
      out << '\n';
    }
  }
}

int cmd_bench(const BenchArgs& a) {
  std::vector<RunReport> runs;
  if (a.csv) std::cout << csv_header() << '\n';
  bool failed = false;
  for (const auto clients : a.oltp) {
    for (const auto& label : a.modes) {
      bool replicated = a.replicated;
      const auto mode = parse_bench_mode(label, &replicated);
      if (!mode) throw CLI::ValidationError("--mode", "unknown mode " + label);
      for (std::size_t rep = 0; rep < a.reps; ++rep) {
        WorkloadSpec spec = a.mix;
        spec.mode = *mode;
        spec.replicated = replicated;
        spec.oltp_clients = clients;
        spec.olap_clients = a.olap;
        spec.duration = std::chrono::milliseconds(static_cast<long>(a.duration * 1000));
        spec.warmup = std::chrono::milliseconds(static_cast<long>(a.warmup * 1000));
        spec.seed = a.seed + rep;
        spec.latency = std::chrono::milliseconds(a.latency_ms);
        spec.statement_latency = std::chrono::microseconds(a.statement_latency_us);
        apply_environment(spec);
        auto report = run_bench(spec);
        if (report.spec.mode == BenchMode::SSI_RSS &&
            (report.prot_waits != 0 || report.prot_aborts != 0)) {
          std::cerr << "read-only waits/aborts in " << label << '\n';
          failed = true;
        }
        std::cout << (a.csv ? to_csv(report) : to_json(report)) << std::endl;
        runs.push_back(std::move(report));
      }
    }
  }
  if (!a.plot_dir.empty()) write_plot(a.plot_dir, runs);
  return failed ? 2 : 0;
}

void add_bench_options(CLI::App* cmd, BenchArgs& a) {
  cmd->add_option("--mode", a.modes, "SSI, SSI_SAFESNAP, SSI_RSS, SI or SSI_SI; comma separated")
      ->delimiter(',');
  cmd->add_option("--oltp", a.oltp, "OLTP client counts; comma separated")->delimiter(',');
  cmd->add_option("--olap", a.olap, "OLAP clients");
  cmd->add_option("--duration", a.duration, "measured seconds");
  cmd->add_option("--warmup", a.warmup, "warmup seconds");
  cmd->add_option("--seed", a.seed);
  cmd->add_option("--reps", a.reps, "runs per configuration, seeds seed..seed+reps-1");
  cmd->add_flag("--replicated", a.replicated, "OLAP clients read a log-shipped replica");
  cmd->add_option("--latency", a.latency_ms, "replication shipping delay in ms");
  cmd->add_flag("--csv", a.csv, "CSV rows instead of JSON");
  cmd->add_option("--plot", a.plot_dir, "directory for gnuplot data files");
  cmd->add_option("--keys", a.mix.key_count);
  cmd->add_option("--warehouses", a.mix.warehouses, "key partitions");
  cmd->add_option("--write-size", a.mix.write_txn_size, "read-modify-write keys per OLTP txn");
  cmd->add_option("--reads", a.mix.oltp_reads, "extra reads per OLTP txn");
  cmd->add_option("--scan", a.mix.scan_size, "keys per OLAP query");
  cmd->add_option("--scan-chunk", a.mix.scan_chunk, "keys per OLAP fetch");
  cmd->add_option("--remote-rate", a.mix.remote_rate, "OLTP txns touching another partition");
  cmd->add_option("--statement-latency", a.statement_latency_us, "round trip per statement, us");
  cmd->add_option("--retry-cap", a.mix.retry_cap);
  cmd->add_option("--audit-threshold", a.mix.audit_threshold, "history ops above which the audit is skipped");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Read-safe-snapshot concurrency control toolkit"};
  app.require_subcommand(1);

  std::string file;
  std::string at;
  auto* check = app.add_subcommand("check", "serializability report for a .mvh history");
  check->add_option("file", file)->required()->check(CLI::ExistingFile);

  auto* rss = app.add_subcommand("rss", "offline snapshot construction at a prefix");
  rss->add_option("file", file)->required()->check(CLI::ExistingFile);
  rss->add_option("--at", at, "history position, or cN / aN for a transaction end")->required();

  FuzzArgs fa;
  auto* fuzz = app.add_subcommand("fuzz", "randomized schedules with oracle checks");
  fuzz->add_option("--seed", fa.seed);
  fuzz->add_option("--txns", fa.txns, "transactions per schedule");
  fuzz->add_option("--keys", fa.keys);
  fuzz->add_option("--iters", fa.iters);
  fuzz->add_option("--mode", fa.mode)->check(CLI::IsMember({"SSI", "SI"}));
  fuzz->add_option("--counterexample", fa.counterexample, "write the shrunk failing history here");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "mixed OLTP/OLAP workload");
  add_bench_options(bench, ba);

  BenchArgs ra;
  ra.modes = {"SSI_SI", "SSI_RSS"};
  ra.replicated = true;
  auto* replicate = app.add_subcommand("replicate", "bench with a log-shipped replica");
  add_bench_options(replicate, ra);

  CLI11_PARSE(app, argc, argv);

  try {
    if (check->parsed()) return cmd_check(file);
    if (rss->parsed()) return cmd_rss(file, at);
    if (fuzz->parsed()) return cmd_fuzz(fa);
    if (bench->parsed()) return cmd_bench(ba);
    if (replicate->parsed()) {
      ra.replicated = true;
      return cmd_bench(ra);
    }
  } catch (const HistoryError& e) {
    std::cerr << file << ':' << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  }
  return kUsageError;
}
