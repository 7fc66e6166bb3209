#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;
};

std::string binary() {
    const char* env = std::getenv("CAUSALFP_BIN");
    if (!env) throw std::runtime_error("CAUSALFP_BIN not set; run via ctest");
    return env;
}

RunResult run(const std::string& args) {
    const std::string cmd = binary() + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) throw std::runtime_error("popen failed");
    RunResult res;
    char buf[4096];
    while (std::size_t got = fread(buf, 1, sizeof(buf), pipe)) res.output.append(buf, got);
    const int status = pclose(pipe);
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return res;
}

fs::path fresh_dir(const std::string& tag) {
    fs::path dir = fs::path(testing::TempDir()) / ("causalfp_cli_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& path, const std::string& content) {
    std::ofstream out(path);
    out << content;
}

}  // namespace

TEST(Cli, UnknownFlagExitsOneWithUsage) {
    const RunResult res = run("--definitely-not-a-flag");
    EXPECT_EQ(res.exit_code, 1);
    EXPECT_NE(res.output.find("Usage"), std::string::npos) << res.output;
}

TEST(Cli, MissingSubcommandExitsOne) {
    const RunResult res = run("");
    EXPECT_EQ(res.exit_code, 1);
}

TEST(Cli, HelpExitsZero) {
    const RunResult res = run("--help");
    EXPECT_EQ(res.exit_code, 0);
    EXPECT_NE(res.output.find("synth"), std::string::npos);
}

TEST(Cli, FitWithMissingFileNamesItAndExitsOne) {
    const auto dir = fresh_dir("missing");
    write_text(dir / "manifest.json",
               R"({"entries":[{"path":"ghost.csv","subject":"S1","task":"rest","session":"A","dt":0.72}],)"
               R"("states":[0,1],"inputs":[2],"normalization":"none"})");
    const RunResult res =
        run("fit --manifest " + (dir / "manifest.json").string() + " --out " + (dir / "sigs").string());
    EXPECT_EQ(res.exit_code, 1);
    EXPECT_NE(res.output.find("ghost.csv"), std::string::npos) << res.output;
}

TEST(Cli, BadSpecJsonExitsOne) {
    const auto dir = fresh_dir("badspec");
    write_text(dir / "spec.json", "{not json");
    const RunResult res =
        run("synth --spec " + (dir / "spec.json").string() + " --out " + (dir / "corpus").string());
    EXPECT_EQ(res.exit_code, 1);
}

// synth -> fit -> subject-id -> report on a small corpus.
TEST(Cli, EndToEndPipeline) {
    const auto dir = fresh_dir("e2e");
    write_text(dir / "spec.json",
               R"({"n_subjects":5,"tasks":["rest"],"m":8,"n":2,"T":250,)"
               R"("sessions":["REST1_LR","REST1_RL"],"seed":31415})");
    ASSERT_EQ(run("synth --spec " + (dir / "spec.json").string() + " --out " + (dir / "corpus").string()).exit_code,
              0);
    ASSERT_TRUE(fs::exists(dir / "corpus" / "manifest.json"));

    ASSERT_EQ(run("fit --manifest " + (dir / "corpus" / "manifest.json").string() + " --out " +
                  (dir / "sigs").string())
                  .exit_code,
              0);
    EXPECT_TRUE(fs::exists(dir / "sigs" / "S001_rest_REST1_LR.sig.csv"));
    EXPECT_TRUE(fs::exists(dir / "sigs" / "S001_rest_REST1_LR.sig.json"));

    for (const std::string method : {"cm-mdp", "cm-fn", "fc-cor"}) {
        const RunResult res = run("subject-id --manifest " + (dir / "corpus" / "manifest.json").string() +
                                  " --db-session REST1_LR --query-sessions REST1_RL --method " + method +
                                  " --report " + (dir / (method + ".json")).string());
        ASSERT_EQ(res.exit_code, 0) << res.output;
        ASSERT_TRUE(fs::exists(dir / (method + ".json")));
    }

    const RunResult rep = run("report --inputs " + (dir / "cm-mdp.json").string() + "," +
                              (dir / "cm-fn.json").string() + "," + (dir / "fc-cor.json").string() + " --out " +
                              (dir / "grid.csv").string());
    ASSERT_EQ(rep.exit_code, 0) << rep.output;
    ASSERT_TRUE(fs::exists(dir / "grid.csv"));
    EXPECT_NE(rep.output.find("cm-mdp"), std::string::npos);

    std::ifstream in(dir / "cm-mdp.json");
    nlohmann::json report;
    in >> report;
    EXPECT_EQ(report.at("kind"), "subject_id");
    EXPECT_EQ(report.at("total_queries").get<int>(), 5);
}

// task-train then task-eval on a tiny two-class corpus.
TEST(Cli, TaskTrainAndEval) {
    const auto dir = fresh_dir("task");
    write_text(dir / "spec.json",
               R"({"n_subjects":6,"tasks":["one","two"],"m":6,"n":2,"T":200,)"
               R"("sessions":["A","B"],"seed":2718})");
    ASSERT_EQ(run("synth --spec " + (dir / "spec.json").string() + " --out " + (dir / "corpus").string()).exit_code,
              0);
    write_text(dir / "train.json",
               R"({"hidden":8,"heads":1,"epochs":40,"batch_size":6,"seed":7,"precision":"float32"})");
    const RunResult tr = run("task-train --manifest " + (dir / "corpus" / "manifest.json").string() + " --config " +
                             (dir / "train.json").string() + " --out " + (dir / "model.json").string() +
                             " --history " + (dir / "history.csv").string());
    ASSERT_EQ(tr.exit_code, 0) << tr.output;
    ASSERT_TRUE(fs::exists(dir / "model.json"));
    ASSERT_TRUE(fs::exists(dir / "history.csv"));

    std::ifstream hist(dir / "history.csv");
    std::string first_line;
    std::getline(hist, first_line);
    EXPECT_EQ(first_line, "epoch,train_loss,test_loss,train_acc,test_acc");

    const RunResult ev = run("task-eval --model " + (dir / "model.json").string() + " --manifest " +
                             (dir / "corpus" / "manifest.json").string() + " --split test --report " +
                             (dir / "task_report.json").string());
    ASSERT_EQ(ev.exit_code, 0) << ev.output;
    std::ifstream in(dir / "task_report.json");
    nlohmann::json report;
    in >> report;
    EXPECT_EQ(report.at("kind"), "task_eval");
    EXPECT_EQ(report.at("classes").get<std::vector<std::string>>().size(), 2u);

    const RunResult grid = run("report --inputs " + (dir / "task_report.json").string());
    EXPECT_EQ(grid.exit_code, 0) << grid.output;
    EXPECT_NE(grid.output.find("overall"), std::string::npos);
}

// A noiseless corpus fitted with ridge 0 hits singular normal equations;
// numerical failures use exit code 2.
TEST(Cli, NumericalFailureExitsTwo) {
    const auto dir = fresh_dir("exit2");
    write_text(dir / "spec.json",
               R"({"n_subjects":2,"tasks":["rest"],"m":6,"n":2,"T":120,"sigma_noise":0.0,)"
               R"("sessions":["A"],"seed":11})");
    ASSERT_EQ(run("synth --spec " + (dir / "spec.json").string() + " --out " + (dir / "corpus").string()).exit_code,
              0);
    const RunResult res = run("fit --manifest " + (dir / "corpus" / "manifest.json").string() + " --out " +
                              (dir / "sigs").string() + " --ridge 0");
    EXPECT_EQ(res.exit_code, 2);
    EXPECT_NE(res.output.find("rank-deficient"), std::string::npos) << res.output;
}

TEST(Cli, ReportSchemaMismatchExitsOne) {
    const auto dir = fresh_dir("mix");
    write_text(dir / "a.json", R"({"kind":"subject_id","method":"cm-mdp","db_session":"A","accuracy":1.0})");
    write_text(dir / "b.json",
               R"({"kind":"task_eval","method":"cm-gnn","classes":["x"],"per_class_accuracy":[1.0],)"
               R"("overall_accuracy":1.0})");
    const RunResult res = run("report --inputs " + (dir / "a.json").string() + "," + (dir / "b.json").string());
    EXPECT_EQ(res.exit_code, 1);
}
