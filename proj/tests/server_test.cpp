// SPDX-License-Identifier: Apache-2.0

#include "test_support.hpp"

#include <probe/annotation_server.hpp>
#include <probe/image_io.hpp>

#include <gtest/gtest.h>

using namespace probe;
using probe::testing::TempDir;

namespace {

DiscoveryHit fixture_hit(int i, int j)
{
    DiscoveryHit h;
    h.hit_id        = discovery_hit_id(i, j);
    h.class_index   = i;
    h.feature_index = j;
    for (int n = 0; n < 5; ++n)
    {
        const std::string id = "img" + std::to_string(n);
        h.visual.push_back({id, 10.0 - n, "/assets/image/" + id + ".png",
                            "/assets/heatmap/" + std::to_string(j) + "/" + id + ".png",
                            "/assets/attack/" + std::to_string(j) + "/" + id + ".png"});
    }
    h.metadata          = {{"hollow square"}, "glyph", "a square outline", {}};
    h.validation_images = {"/assets/image/v0.png", "/assets/image/v1.png", "/assets/image/v2.png"};
    return h;
}

class ServerTest : public ::testing::Test
{
protected:
    void SetUp() override
    {
        store.add(fixture_hit(4, 9));
        store.add(fixture_hit(4, 10));
        write_file_bytes(dir / "assets/image/img0.png", "png-bytes");
        server = std::make_unique<AnnotationServer>(
            store, ServerOptions{"secret", dir / "assets", dir / "annotation"});
        port = server->bind("127.0.0.1", 0);
        server->start();
        client = std::make_unique<httplib::Client>("127.0.0.1", port);
        auth   = {{"Authorization", "Bearer secret"}};
    }
    void TearDown() override { server->stop(); }

    httplib::Result post(const std::string &hit, const nlohmann::json &body)
    {
        return client->Post("/hits/" + hit + "/responses", auth, body.dump(), "application/json");
    }

    TempDir                           dir;
    AnnotationStore                   store{5};
    std::unique_ptr<AnnotationServer> server;
    std::unique_ptr<httplib::Client>  client;
    httplib::Headers                  auth;
    int                               port = 0;
};

nlohmann::json response(const std::string &hit, const std::string &worker, const std::string &choice)
{
    return {{"hit_id", hit}, {"worker_id", worker}, {"choice", choice}, {"reason", "looked at it"}, {"confidence", 4}};
}

} // namespace

TEST_F(ServerTest, ListsAndServesManifests)
{
    auto res = client->Get("/hits?status=open", auth);
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    EXPECT_EQ(nlohmann::json::parse(res->body)["hits"], (nlohmann::json{"d-4-10", "d-4-9"}));

    res = client->Get("/hits/d-4-9", auth);
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    auto m = nlohmann::json::parse(res->body);
    EXPECT_EQ(m["kind"], "discovery");
    EXPECT_EQ(m["status"], "open");
    EXPECT_EQ(m["visual"].size(), 5u);
    int assets = static_cast<int>(m["validation_images"].size());
    for (const auto &v : m["visual"])
        assets += !v["image"].get<std::string>().empty() + !v["heatmap"].get<std::string>().empty()
                  + !v["attack"].get<std::string>().empty();
    EXPECT_EQ(assets, 18);

    res = client->Get("/hits/d-9-9", auth);
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 404);
    EXPECT_EQ(nlohmann::json::parse(res->body)["error"], "not_found");

    res = client->Get("/hits?status=bogus", auth);
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);
}

TEST_F(ServerTest, RequiresBearerToken)
{
    auto res = client->Get("/hits");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 401);
    res = client->Post("/hits/d-4-9/responses", {{"Authorization", "Bearer wrong"}},
                       response("d-4-9", "w0", "background").dump(), "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 401);
    EXPECT_TRUE(store.responses("d-4-9").empty());
}

TEST_F(ServerTest, ScriptedRoundTripReachesSpuriousVerdict)
{
    const std::vector<std::string> choices{"separate_objects", "background", "main_object", "separate_objects",
                                           "main_object"};
    for (std::size_t k = 0; k < choices.size(); ++k)
    {
        auto res = post("d-4-9", response("d-4-9", "w" + std::to_string(k), choices[k]));
        ASSERT_TRUE(res);
        EXPECT_EQ(res->status, 201);
        auto body = nlohmann::json::parse(res->body);
        EXPECT_EQ(body["responses"], k + 1);
        EXPECT_EQ(body["status"], k + 1 < choices.size() ? "accepted" : "closed");
        if (k + 1 == choices.size())
        {
            EXPECT_EQ(body["verdict"], "spurious");
        }
    }
    auto res = post("d-4-9", response("d-4-9", "w9", "background"));
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 409);

    res = client->Get("/ledger", auth);
    ASSERT_TRUE(res);
    const auto ledger = AnnotationLedger::from_json(nlohmann::json::parse(res->body));
    ASSERT_NE(ledger.find(4, 9), nullptr);
    EXPECT_EQ(ledger.find(4, 9)->verdict, Verdict::spurious);
    EXPECT_EQ(ledger.find(4, 9)->votes.at("separate_objects"), 2);
    EXPECT_EQ(ledger.find(4, 10), nullptr);

    res = client->Get("/hits?status=closed", auth);
    EXPECT_EQ(nlohmann::json::parse(res->body)["hits"], (nlohmann::json{"d-4-9"}));
    EXPECT_TRUE(std::filesystem::exists(dir / "annotation/ledger.json"));
}

TEST_F(ServerTest, RejectsMalformedAndInvalidResponses)
{
    auto res = client->Post("/hits/d-4-9/responses", auth, "{not json", "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);
    auto bad       = response("d-4-9", "w0", "main_object");
    bad["choice"]  = "same";
    res            = post("d-4-9", bad);
    EXPECT_EQ(res->status, 400);
    bad               = response("d-4-9", "w0", "main_object");
    bad["confidence"] = 7;
    EXPECT_EQ(post("d-4-9", bad)->status, 400);
    EXPECT_EQ(post("d-4-9", response("d-4-10", "w0", "main_object"))->status, 400);
    EXPECT_EQ(post("d-0-0", response("d-0-0", "w0", "main_object"))->status, 404);
}

TEST_F(ServerTest, ServesAssetsAndPreflight)
{
    auto res = client->Get("/assets/image/img0.png");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    EXPECT_EQ(res->body, "png-bytes");
    res = client->Options("/hits");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 204);
    EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
}

TEST_F(ServerTest, JournalReplayRestoresState)
{
    for (int k = 0; k < 3; ++k)
        ASSERT_EQ(post("d-4-10", response("d-4-10", "w" + std::to_string(k), "main_object"))->status, 201);
    AnnotationStore fresh(5);
    fresh.add(fixture_hit(4, 9));
    fresh.add(fixture_hit(4, 10));
    EXPECT_EQ(replay_responses(fresh, dir / "annotation/responses.jsonl"), 3u);
    EXPECT_EQ(fresh.manifest("d-4-10")["responses"], 3);
}
