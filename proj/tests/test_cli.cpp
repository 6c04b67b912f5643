#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "epcl_test_cli";

struct Run {
  int code;
  std::string out;
};

Run epcl(const std::string& args) {
  const auto log = kWork / "stdout.txt";
  const std::string cmd = std::string(EPCL_BINARY) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream f(log);
  std::stringstream s;
  s << f.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, s.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ext) ++n;
  return n;
}

struct Fixture {
  Fixture() {
    static bool once = [] {
      fs::remove_all(kWork);
      fs::create_directories(kWork);
      return true;
    }();
    (void)once;
  }
};

}  // namespace

TEST_CASE_FIXTURE(Fixture, "argument errors exit with 2") {
  CHECK(epcl("").code == 2);
  CHECK(epcl("bogus").code == 2);
  CHECK(epcl("synth").code == 2);
  CHECK(epcl("synth --out x --n -3").code == 2);
  const auto r = epcl("train --override nonsense_key=1");
  CHECK(r.code == 2);
  CHECK(r.out.find("combination_mode") != std::string::npos);
  CHECK(epcl("train --override combination_mode=sideways").code == 2);
  CHECK(epcl("--help").code == 0);
}

TEST_CASE_FIXTURE(Fixture, "synth is deterministic and splits by fraction") {
  REQUIRE(epcl("synth --out " + (kWork / "s1").string() + " --n 20 --n-test 1 --shape 16,16,16 --seed 4 --labeled-frac 0.1").code == 0);
  REQUIRE(epcl("synth --out " + (kWork / "s2").string() + " --n 20 --n-test 1 --shape 16,16,16 --seed 4 --labeled-frac 0.1").code == 0);
  for (const auto& e : fs::directory_iterator(kWork / "s1" / "images"))
    CHECK(slurp(e.path()) == slurp(kWork / "s2" / "images" / e.path().filename()));
  const auto splits = nlohmann::json::parse(slurp(kWork / "s1" / "splits.json"));
  CHECK(splits["labeled"].size() == 2);
  CHECK(splits["unlabeled"].size() == 18);
  CHECK(splits["test"].size() == 1);
}

TEST_CASE_FIXTURE(Fixture, "train, eval, predict and uq-report") {
  const auto data = kWork / "d";
  const auto run = kWork / "run";
  REQUIRE(epcl("synth --out " + data.string() + " --n 6 --n-test 2 --shape 24,24,24 --seed 9 --labeled-frac 0.5").code == 0);
  {
    std::ofstream cfg(kWork / "smoke.cfg");
    cfg << "preset = tiny\npatch = 16,16,16\nstride = 8,8,8\ntotal_iters = 2\n";
  }
  const auto t = epcl("train --config " + (kWork / "smoke.cfg").string() + " --override data_dir=" + data.string() +
                      " out_dir=" + run.string() + " combination_mode=concat");
  REQUIRE(t.code == 0);
  CHECK(t.out.find("final: ") != std::string::npos);
  const auto cfg = nlohmann::json::parse(slurp(run / "config.json"));
  CHECK(cfg["combination_mode"] == "concat");
  CHECK(cfg["total_iters"] == 2);
  REQUIRE(fs::exists(run / "final.epcl"));

  const auto csv_path = kWork / "metrics.csv";
  const auto e = epcl("eval --checkpoint " + (run / "final.epcl").string() + " --data " + data.string() + " --out " +
                      csv_path.string());
  REQUIRE(e.code == 0);
  CHECK(e.out.find("dice ") != std::string::npos);
  std::ifstream csv(csv_path);
  std::string line;
  int rows = 0;
  bool mean_row = false;
  while (std::getline(csv, line)) {
    ++rows;
    if (line.rfind("mean,", 0) == 0) mean_row = true;
  }
  CHECK(rows == 1 + 2 + 1);  // header, two test cases with one class each, mean
  CHECK(mean_row);

  const auto in = data / "images" / "test_000.json";
  const auto p = epcl("predict --checkpoint " + (run / "final.epcl").string() + " --in " + in.string() + " --out " +
                      (kWork / "pred" / "seg.nii.gz").string());
  REQUIRE(p.code == 0);
  CHECK(fs::exists(kWork / "pred" / "seg.nii.gz"));
  CHECK(fs::exists(kWork / "pred" / "seg_prob_c0.nii.gz"));
  CHECK(fs::exists(kWork / "pred" / "seg_prob_c1.nii.gz"));

  const auto uq = kWork / "uq";
  REQUIRE(epcl("uq-report --checkpoint " + (run / "final.epcl").string() + " --in " + in.string() + " --out " +
               uq.string()).code == 0);
  CHECK(count_files(uq / "entropy", ".png") == 24);
  CHECK(count_files(uq / "juq", ".png") == 24);
  const auto summary = nlohmann::json::parse(slurp(uq / "summary.json"));
  CHECK(summary.contains("entropy"));
  CHECK(summary.contains("juq"));

  CHECK(epcl("predict --checkpoint " + (kWork / "missing.epcl").string() + " --in " + in.string() + " --out " +
             (kWork / "x.nii").string()).code == 1);
}
