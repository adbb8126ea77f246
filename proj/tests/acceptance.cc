// Acceptance driver: runs the test cases behind each criterion as separate
// processes and prints one PASS/FAIL line per criterion. Logs go to
// acceptance_logs/ next to the test binaries.
#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

  struct Run {
    std::string binary;
    std::string filter;  // doctest --test-case list
  };

  struct Criterion {
    int id;
    std::string title;
    double time_limit;  // seconds; 0 = none
    std::vector<Run> runs;
  };

  const fs::path kBinDir = SEQFORGE_TEST_BIN_DIR;

  std::vector<Criterion> criteria() {
    const std::string grad_ops =
        "matmul gradient*,bmm and linear gradients,masked softmax,layer norm,label-smoothed cross entropy,"
        "backward basics,shared subexpressions*,elementwise and layout ops*,embedding gather and dropout";
    const std::string grad_model = "full model gradients match finite differences";
    return {
      {1, "gradient integrity (ops and tied/untied model, 32-bit and 64-bit)", 120,
       {{"test_tensor", grad_ops}, {"test_tensor_f64", grad_ops}, {"test_model", grad_model},
        {"test_model_f64", grad_model}, {"test_distill_loss", "*gradients*"},
        {"test_distill_loss_f64", "*gradients*"}}},
      {2, "copy-task overfit (>= 99% greedy token accuracy within 2000 steps)", 300,
       {{"acceptance_runs", "acceptance: copy task overfit"}}},
      {3, "denoising pretraining beats the from-scratch baseline by >= 2 BLEU (median of 3 seeds)", 1800,
       {{"acceptance_runs", "acceptance: pretraining helps"}}},
      {4, "wait-k masking and decoding over 200 random configurations", 60,
       {{"test_model", "wait-k cross mask,wait-k forward"}, {"test_decode", "wait-k decoding"},
        {"acceptance_runs", "acceptance: wait-k over random configurations"}}},
      {5, "data-parallel equivalence for 2 and 4 workers", 120,
       {{"test_train", "gradient averaging,data-parallel equivalence"}}},
      {6, "distillation identities", 0,
       {{"test_distill_loss", "logit distillation on the two-class example,logit distillation identities"},
        {"test_distill_loss_f64", "logit distillation on the two-class example,logit distillation identities"},
        {"test_distill", "self-distillation is exactly zero,teacher receives no gradient"}}},
      {7, "tied layers: 5/6 fewer layer parameters, tied model passes the copy task within 4000 steps", 0,
       {{"test_model", "tied layers share one parameter set,parameter count for the base configuration"},
        {"acceptance_runs", "acceptance: tied layers"}}},
      {8, "search: beam 4 equals exhaustive argmax, beam 1 equals greedy, scores match forced decoding", 0,
       {{"test_decode",
         "beam of four equals exhaustive enumeration,beam of one equals greedy,"
         "hypothesis log-probability equals the forced score"}}},
      {9, "BLEU matches hand-counted oracles; identical corpora score 100", 0,
       {{"test_text", "hand-counted bleu,bleu against the reference counter on constructed cases,bleu properties"}}},
      {10, "transfer: identity reproduces decodes, vocabulary remap copies shared rows bitwise", 0,
       {{"test_transfer", "identity transfer,embedding remap"}}},
      {11, "checkpoint round trip and resume after 500 further steps", 0,
       {{"test_train", "checkpoint container,training loops"},
        {"acceptance_runs", "acceptance: resume after interruption"}}},
    };
  }

  std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  }

  // Returns an empty string on success, otherwise the reason for failure.
  std::string execute(const Run& run, const fs::path& log) {
    const fs::path bin = kBinDir / run.binary;
    if (!fs::exists(bin))
      return run.binary + " not built";
    const std::string cmd = "'" + bin.string() + "' --test-case='" + run.filter + "' >> '" + log.string() + "' 2>&1";
    {
      std::ofstream(log, std::ios::app) << "$ " << run.binary << " --test-case='" << run.filter << "'\n";
    }
    const int status = std::system(cmd.c_str());
    // Only the summary line of this run matters; earlier runs share the log.
    const std::string text = slurp(log);
    const std::regex summary(R"(test cases:\s*(\d+)\s*\|\s*(\d+) passed\s*\|\s*(\d+) failed)");
    std::smatch m, last;
    for (auto it = text.cbegin(); std::regex_search(it, text.cend(), m, summary); it = m.suffix().first)
      last = m;
    if (status != 0)
      return run.binary + " failed";
    // Every comma-separated name must select at least one case.
    const auto names = static_cast<int>(std::count(run.filter.begin(), run.filter.end(), ',')) + 1;
    if (last.empty() || std::stoi(last[2]) < names)
      return run.binary + " ran fewer cases than names in '" + run.filter + "'";
    return "";
  }

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> only;
  for (int i = 1; i < argc; ++i)
    only.push_back(std::atoi(argv[i]));
  const fs::path logs = kBinDir / "acceptance_logs";
  fs::create_directories(logs);

  int failed = 0;
  for (const auto& c : criteria()) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end())
      continue;
    const fs::path log = logs / ("criterion_" + std::to_string(c.id) + ".log");
    fs::remove(log);
    const auto t0 = std::chrono::steady_clock::now();
    std::string reason;
    for (const auto& run : c.runs) {
      reason = execute(run, log);
      if (!reason.empty())
        break;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (reason.empty() && c.time_limit > 0 && secs > c.time_limit) {
      std::ostringstream s;
      s << "took " << std::fixed << std::setprecision(1) << secs << " s, limit " << c.time_limit << " s";
      reason = s.str();
    }
    failed += !reason.empty();
    std::cout << (reason.empty() ? "PASS" : "FAIL") << " criterion " << c.id << ": " << c.title << " ["
              << std::fixed << std::setprecision(1) << secs << " s]";
    if (!reason.empty())
      std::cout << " -- " << reason << " (see " << log.string() << ")";
    std::cout << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
