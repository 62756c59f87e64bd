// Drives the CLI binary end to end: argv[1] is the binary, argv[2] the
// committed fixture directory.
#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <string>

#include "test_support.hpp"

namespace {

std::string g_cli;
std::string g_fixtures;

int run(const std::string& args) {
  std::string cmd = g_cli + " " + args + " >/dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

int run_capture(const std::string& args, const std::string& out_file) {
  std::string cmd = g_cli + " " + args + " >" + out_file + " 2>/dev/null";
  int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

}  // namespace

TEST_CASE("cli pipeline on the committed fixtures") {
  std::string out = fedgen::test::make_temp_dir("cli");
  std::string cfg = g_fixtures + "/demo.json";
  std::string common = "--config " + cfg + " --output-dir " + out +
                       " --set train.pretrain_epochs=2 --set fed.rounds=2";

  CHECK(run("pretrain " + common) == 0);
  CHECK(run("pretrain --inverse " + common) == 0);
  CHECK(run("fedtune " + common + " --pretrained " + out +
            "/pretrain/model.ckpt") == 0);
  CHECK(run("tune-rerank " + common + " --model " + out +
            "/fedtune/server/model.ckpt --personas " + out +
            "/fedtune/clients --inverse-model " + out +
            "/pretrain_inverse/model.ckpt") == 0);
  CHECK(run("evaluate " + common + " --model " + out +
            "/fedtune/server/model.ckpt --personas " + out +
            "/fedtune/clients --split dev") == 0);

  std::string response_file = out + "/response.txt";
  CHECK(run_capture("generate " + common + " --model " + out +
                        "/fedtune/server/model.ckpt --personas " + out +
                        "/fedtune/clients --speaker speaker0 --question " +
                        "\"how are you today\" --nbest " + out +
                        "/nbest.jsonl",
                    response_file) == 0);
  std::string response = fedgen::test::read_file(response_file);
  CHECK(!response.empty());
  CHECK(!fedgen::test::read_file(out + "/nbest.jsonl").empty());
}

TEST_CASE("cli exit codes follow the contract") {
  std::string out = fedgen::test::make_temp_dir("cli_err");
  std::string cfg = g_fixtures + "/demo.json";

  // 2: config/input problems.
  CHECK(run("pretrain --config " + g_fixtures + "/no_such.json") == 2);
  CHECK(run("pretrain --config " + cfg + " --output-dir " + out +
            " --set data.pretrain.path=missing.txt") == 2);
  CHECK(run("pretrain --config " + cfg + " --output-dir " + out +
            " --set model.bogus=1") == 2);

  // Build a tiny artifact set for the domain/schema cases.
  std::string common = "--config " + cfg + " --output-dir " + out +
                       " --set train.pretrain_epochs=1 --set fed.rounds=1";
  REQUIRE(run("pretrain " + common) == 0);
  REQUIRE(run("fedtune " + common + " --pretrained " + out +
              "/pretrain/model.ckpt") == 0);

  // 3: schema mismatch (checkpoint trained with other dimensions).
  CHECK(run("fedtune " + common + " --set model.hidden_size=20 " +
            "--pretrained " + out + "/pretrain/model.ckpt") == 3);

  // 4: unknown speaker.
  CHECK(run("generate " + common + " --model " + out +
            "/fedtune/server/model.ckpt --personas " + out +
            "/fedtune/clients --speaker nobody --question \"hi there\"") ==
        4);
}

int main(int argc, char** argv) {
  doctest::Context context;
  if (argc < 3) {
    std::fprintf(stderr, "usage: test_cli <cli-binary> <fixtures-dir>\n");
    return 1;
  }
  g_cli = argv[1];
  g_fixtures = argv[2];
  context.applyCommandLine(1, argv);
  return context.run();
}
