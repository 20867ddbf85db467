// SPDX-License-Identifier: Apache-2.0

#include "test_support.hpp"

#include <probe/annotation_server.hpp>
#include <probe/pipeline.hpp>

#include <gtest/gtest.h>

#include <cstdio>
#include <sys/wait.h>

using namespace probe;
using probe::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct CommandResult
{
    int         status = -1;
    std::string output;
};

CommandResult run_command(const std::string &cmd)
{
    CommandResult r;
    FILE         *p = ::popen(cmd.c_str(), "r");
    if (!p)
        return r;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, p))
        r.output.append(buf, n);
    const int st = ::pclose(p);
    r.status     = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

std::map<std::string, std::string> tree_bytes(const fs::path &root)
{
    std::map<std::string, std::string> out;
    for (const auto &e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file())
            out[fs::relative(e.path(), root).generic_string()] = read_file_bytes(e.path());
    return out;
}

} // namespace

class PipelineTest : public ::testing::Test
{
protected:
    static void SetUpTestSuite()
    {
        dir_ = new TempDir;
        PlantConfig plant;
        plant.num_classes      = 4;
        plant.images_per_class = 16;
        plant.seed             = 3;
        TrainConfig train;
        train.epochs = 2;
        bench_       = new SyntheticBench(prepare_synthetic_bench(dir_->path() / "bench", plant, train));
    }
    static void TearDownTestSuite()
    {
        delete bench_;
        delete dir_;
    }

    static PipelineConfig small_config()
    {
        PipelineConfig c    = PipelineConfig::load(bench_->config_path);
        c.n_extreme         = 1;
        c.top_features      = 3;
        c.k                 = 8;
        c.attack.iterations = 2;
        c.sigmas            = {0.0, 0.5};
        return c;
    }

    static void run_all(Pipeline &p)
    {
        for (const char *s : {"extract", "select", "hits"})
            p.run(s);
        p.annotate_scripted();
        p.run("subsets");
        p.annotate_scripted();
        for (const char *s : {"subsets", "dataset", "evaluate", "report"})
            p.run(s);
    }

    static TempDir        *dir_;
    static SyntheticBench *bench_;
};

TempDir        *PipelineTest::dir_   = nullptr;
SyntheticBench *PipelineTest::bench_ = nullptr;

TEST_F(PipelineTest, ConfigResolvesPathsAndRoundTrips)
{
    const auto c = PipelineConfig::load(bench_->config_path);
    EXPECT_EQ(c.feature_source_model, bench_->root / "model.json");
    EXPECT_EQ(c.inspected_model, c.feature_source_model);
    EXPECT_EQ(c.data_root, bench_->root / "data");
    EXPECT_EQ(c.seed, 3u);

    TempDir  d;
    auto     edited = small_config();
    edited.clip     = true;
    const fs::path file = bench_->root / "edited.toml";
    write_file_bytes(file, edited.to_toml(bench_->root));
    EXPECT_EQ(PipelineConfig::load(file).to_json(), edited.to_json());
    fs::remove(file);
}

TEST_F(PipelineTest, ConfigErrors)
{
    TempDir d;
    EXPECT_THROW(PipelineConfig::load(d / "absent.toml"), NotFoundError);
    write_file_bytes(d / "broken.toml", "[models\nfeature_source = ");
    EXPECT_THROW(PipelineConfig::load(d / "broken.toml"), InvalidArgument);
    write_file_bytes(d / "nomodel.toml", "[models]\nfeature_source = \"nope.json\"\n[data]\nroot = \"x\"\n");
    EXPECT_THROW(PipelineConfig::load(d / "nomodel.toml"), NotFoundError);

    auto c   = small_config();
    c.k      = 0;
    EXPECT_THROW(c.validate(), InvalidArgument);
    c        = small_config();
    c.sigmas = {0.25, -1.0};
    EXPECT_THROW(c.validate(), InvalidArgument);
    write_file_bytes(d / "model.json", "{\"format\": \"other\"}");
    EXPECT_THROW(load_model(d / "model.json"), CapabilityError);
}

TEST_F(PipelineTest, StagesReportMissingUpstreamArtifacts)
{
    TempDir  d;
    Pipeline p(small_config(), d.path());
    try
    {
        p.run("select");
        FAIL() << "expected MissingArtifactError";
    }
    catch (const MissingArtifactError &e)
    {
        EXPECT_EQ(e.code(), "missing_artifact");
        EXPECT_NE(std::string(e.what()).find("probe extract"), std::string::npos);
    }
    p.run("extract");
    p.run("select");
    p.run("hits");
    try
    {
        p.run("subsets");
        FAIL() << "expected MissingArtifactError";
    }
    catch (const MissingArtifactError &e)
    {
        EXPECT_NE(std::string(e.what()).find("probe annotate"), std::string::npos);
    }
    EXPECT_THROW(p.run("bogus"), InvalidArgument);
}

TEST_F(PipelineTest, FullRunIsIdempotent)
{
    TempDir  d;
    Pipeline p(small_config(), d.path());
    run_all(p);
    EXPECT_TRUE(fs::exists(d / "report/summary.json"));
    EXPECT_TRUE(fs::exists(d / "evaluate/report.json"));
    EXPECT_FALSE(nlohmann::json::parse(read_file_bytes(d / "dataset/manifest.json"))["samples"].empty());
    const auto first = tree_bytes(d.path());

    for (const auto &s : stage_order())
        EXPECT_TRUE(p.run(s).up_to_date) << s;
    EXPECT_EQ(tree_bytes(d.path()), first);

    Pipeline again(small_config(), d.path());
    again.set_force(true);
    for (const auto &s : stage_order())
        EXPECT_FALSE(again.run(s).up_to_date) << s;
    EXPECT_EQ(tree_bytes(d.path()), first);

    // A fresh directory produces the same artifacts.
    TempDir  e;
    Pipeline other(small_config(), e.path());
    run_all(other);
    EXPECT_EQ(tree_bytes(e.path()), first);
}

TEST_F(PipelineTest, ChangedConfigInvalidatesStages)
{
    TempDir  d;
    Pipeline p(small_config(), d.path());
    p.run("extract");
    p.run("select");
    auto c         = small_config();
    c.top_features = 2;
    Pipeline q(c, d.path());
    EXPECT_FALSE(q.run("select").up_to_date);
    const auto top = nlohmann::json::parse(read_file_bytes(d / "select/top_features.json"));
    for (const auto &cls : top)
        EXPECT_LE(cls.at("features").size(), 2u);
}

TEST_F(PipelineTest, ScriptedAnnotationThroughHttpMatchesInProcess)
{
    TempDir  a, b;
    Pipeline in_process(small_config(), a.path());
    Pipeline over_http(small_config(), b.path());
    for (Pipeline *p : {&in_process, &over_http})
        for (const char *s : {"extract", "select", "hits"})
            p->run(s);
    in_process.annotate_scripted();

    auto             store = over_http.annotation_store();
    AnnotationServer server(*store, ServerOptions{"tok", over_http.asset_dir(), over_http.annotation_dir()});
    const int        port = server.bind("127.0.0.1", 0);
    server.start();
    const std::size_t n = over_http.scripted_annotator().annotate("http://127.0.0.1:" + std::to_string(port), "tok");
    server.stop();
    over_http.save_ledger(*store);

    EXPECT_GT(n, 0u);
    EXPECT_EQ(read_file_bytes(a / "annotation/ledger.json"), read_file_bytes(b / "annotation/ledger.json"));
    EXPECT_TRUE(store->open_hits().empty());
}

TEST_F(PipelineTest, CliReportsErrorsAsJsonWithExitCodes)
{
    const std::string cli = PROBE_CLI_PATH;
    TempDir           d;

    auto r = run_command("'" + cli + "' extract -c '" + (d / "missing.toml").string() + "' 2>&1 >/dev/null");
    EXPECT_EQ(r.status, 3);
    auto err = nlohmann::json::parse(r.output);
    EXPECT_EQ(err["error"], "not_found");

    const std::string common = " -c '" + bench_->config_path.string() + "' --stage-dir '" + d.path().string() + "'";
    r = run_command("'" + cli + "' subsets" + common + " 2>&1 >/dev/null");
    EXPECT_EQ(r.status, 3);
    EXPECT_EQ(nlohmann::json::parse(r.output)["error"], "missing_artifact");

    r = run_command("'" + cli + "' annotate" + common + " 2>&1 >/dev/null");
    EXPECT_EQ(r.status, 2);
    EXPECT_EQ(nlohmann::json::parse(r.output)["error"], "invalid_argument");

    r = run_command("'" + cli + "' extract" + common + " 2>/dev/null");
    EXPECT_EQ(r.status, 0);
    const auto line = nlohmann::json::parse(r.output);
    EXPECT_EQ(line["stage"], "extract");
    EXPECT_EQ(line["up_to_date"], false);
    r = run_command("'" + cli + "' extract" + common + " 2>/dev/null");
    EXPECT_EQ(nlohmann::json::parse(r.output)["up_to_date"], true);
}
