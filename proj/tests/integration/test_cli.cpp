#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "nlohmann/json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("tscan_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

int run(const std::string& args) {
  const std::string cmd = std::string(TSCAN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

std::string run_capture(const std::string& args) {
  const std::string cmd = std::string(TSCAN_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[4096];
  std::size_t got;
  while ((got = fread(buf, 1, sizeof(buf), pipe)) > 0) out.append(buf, got);
  pclose(pipe);
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

const std::string kGenFlags =
    "--n 400 --treatment binary --bias-strength 1.0 --context-modulation 0.5 "
    "--noise-sd 0.5 --seed 5 --train-fraction 0.8";

std::string tiny_train_config() {
  json j;
  j["model"] = {{"embedding_dim", 4},
                {"attention_heads", 1},
                {"head_mlp_widths", {8}},
                {"context_mlp_widths", {6}}};
  j["train"] = {{"max_epochs", 2}, {"patience", 2}, {"batch_size", 64}, {"seed", 3}};
  return j.dump();
}

}  // namespace

TEST_CASE("the dataset generator is deterministic and self-describing") {
  TempDir tmp;
  CHECK(run("gen-data " + kGenFlags + " --out " + tmp.sub("a")) == 0);
  for (const char* name : {"train.csv", "test.csv", "schema.json", "dgp.json", "manifest.json"}) {
    CHECK(fs::exists(tmp.path / "a" / name));
  }
  CHECK(run("gen-data " + kGenFlags + " --out " + tmp.sub("b")) == 0);
  CHECK(slurp(tmp.sub("a") + "/train.csv") == slurp(tmp.sub("b") + "/train.csv"));
  CHECK(slurp(tmp.sub("a") + "/test.csv") == slurp(tmp.sub("b") + "/test.csv"));

  const json manifest = json::parse(slurp(tmp.sub("a") + "/manifest.json"));
  CHECK(manifest["command"] == "gen-data");
  CHECK(manifest["outputs"]["train"].contains("hash"));
}

TEST_CASE("describe-dgp prints the generator coefficients as JSON") {
  const std::string out = run_capture("describe-dgp --n 100 --seed 2 --treatment binary");
  const json j = json::parse(out);
  CHECK(j.contains("selection_score"));
  CHECK(j.contains("treatment_effect"));
  CHECK(j["n"] == 100);
}

TEST_CASE("train, predict and evaluate chain end to end") {
  TempDir tmp;
  REQUIRE(run("gen-data " + kGenFlags + " --out " + tmp.sub("data")) == 0);
  spit(tmp.sub("train.json"), tiny_train_config());

  CHECK(run("train --config " + tmp.sub("train.json") + " --data " + tmp.sub("data") +
            "/train.csv --out " + tmp.sub("fit")) == 0);
  for (const char* name : {"canu.ckpt", "cand.ckpt", "pseudo_labels.jsonl", "stage1_log.json",
                           "stage2_log.json", "manifest.json"}) {
    CHECK(fs::exists(tmp.path / "fit" / name));
  }

  const std::string predict_args = "predict --checkpoint " + tmp.sub("fit") +
                                   "/cand.ckpt --data " + tmp.sub("data") + "/test.csv --seed 7";
  CHECK(run(predict_args + " --out " + tmp.sub("p1.csv")) == 0);
  CHECK(run(predict_args + " --out " + tmp.sub("p2.csv")) == 0);
  const std::string preds = slurp(tmp.sub("p1.csv"));
  CHECK(preds == slurp(tmp.sub("p2.csv")));
  CHECK(preds.rfind("record_id,y_hat_factual,t_cf,y_hat_counterfactual,uplift_hat\n", 0) == 0);

  CHECK(run("evaluate --data " + tmp.sub("data") + "/test.csv --checkpoint tscan=" +
            tmp.sub("fit") + "/cand.ckpt --oracle --random --min-group-size 5 --out " +
            tmp.sub("eval")) == 0);
  CHECK(fs::exists(tmp.path / "eval" / "report.json"));
  CHECK(fs::exists(tmp.path / "eval" / "gain_curves.csv"));
  const json report = json::parse(slurp(tmp.sub("eval") + "/report.json"));
  bool saw_oracle = false;
  for (const auto& entry : report["models"]) saw_oracle |= entry["model"] == "oracle";
  CHECK(saw_oracle);
}

TEST_CASE("pipeline-order and artifact-mismatch failures use distinct exit codes") {
  TempDir tmp;
  REQUIRE(run("gen-data " + kGenFlags + " --out " + tmp.sub("data")) == 0);
  spit(tmp.sub("train.json"), tiny_train_config());

  // Stage 2 without any first-stage artifact: pipeline order violation.
  CHECK(run("train --config " + tmp.sub("train.json") + " --data " + tmp.sub("data") +
            "/train.csv --out " + tmp.sub("fit2") + " --stage 2") == 3);

  // A schema that disagrees with the checkpoint: artifact mismatch.
  REQUIRE(run("train --config " + tmp.sub("train.json") + " --data " + tmp.sub("data") +
              "/train.csv --out " + tmp.sub("fit")) == 0);
  REQUIRE(run("gen-data --n 60 --treatment continuous --seed 4 --out " + tmp.sub("cont")) == 0);
  CHECK(run("predict --checkpoint " + tmp.sub("fit") + "/cand.ckpt --data " + tmp.sub("data") +
            "/test.csv --schema " + tmp.sub("cont") + "/schema.json --out " +
            tmp.sub("p.csv")) == 4);
}

TEST_CASE("configuration and usage failures exit with code 2") {
  TempDir tmp;
  spit(tmp.sub("broken.json"), "{ not json");
  CHECK(run("gen-data --config " + tmp.sub("broken.json") + " --out " + tmp.sub("x")) == 2);
  spit(tmp.sub("unknown.json"), "{\"mystery\": 1}");
  CHECK(run("gen-data --config " + tmp.sub("unknown.json") + " --out " + tmp.sub("x")) == 2);
  CHECK(run("train --data " + tmp.sub("missing.csv") + " --out " + tmp.sub("x")) == 2);
  CHECK(run("gen-data --n 100 --treatment sorta") == 2);
  CHECK(run("no-such-command") == 2);
}
