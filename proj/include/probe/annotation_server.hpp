/*
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// HTTP+JSON front of an AnnotationStore.
//
//   GET  /hits?status=open|closed|all
//   GET  /hits/{id}
//   POST /hits/{id}/responses
//   GET  /ledger
//   GET  /assets/...            static files from the asset directory

#include "annotation.hpp"
#include "image_io.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>

namespace probe {

struct ServerOptions
{
    std::string           bearer_token; // empty disables authentication
    std::filesystem::path asset_dir;    // served under /assets
    std::filesystem::path persist_dir;  // responses.jsonl and ledger.json; empty keeps state in memory
};

inline nlohmann::json error_body(const std::string &code, const std::string &message)
{
    return {{"error", code}, {"message", message}};
}

/// Replays a responses.jsonl journal into `store`. Responses to HITs that
/// are already closed are skipped.
inline std::size_t replay_responses(AnnotationStore &store, const std::filesystem::path &journal)
{
    std::ifstream in(journal);
    if (!in)
        return 0;
    std::size_t n = 0;
    std::string line;
    while (std::getline(in, line))
    {
        if (line.empty())
            continue;
        auto r = nlohmann::json::parse(line).get<WorkerResponse>();
        try
        {
            store.submit(r.hit_id, r);
            ++n;
        }
        catch (const ConflictError &)
        {
        }
    }
    return n;
}

class AnnotationServer
{
public:
    AnnotationServer(AnnotationStore &store, ServerOptions options)
        : store_(store)
        , options_(std::move(options))
    {
        routes();
    }

    ~AnnotationServer() { stop(); }

    AnnotationServer(const AnnotationServer &)            = delete;
    AnnotationServer &operator=(const AnnotationServer &) = delete;

    /// Binds to `port`, or to a free port when port is 0. Returns the port.
    int bind(const std::string &host = "127.0.0.1", int port = 0)
    {
        const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
        if (bound < 0)
            throw IoError("cannot bind " + host + ":" + std::to_string(port));
        port_ = bound;
        return bound;
    }

    /// Serves until stop(); blocks.
    void listen() { server_.listen_after_bind(); }

    void start()
    {
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    void stop()
    {
        server_.stop();
        if (thread_.joinable())
            thread_.join();
    }

    int port() const noexcept { return port_; }

private:
    static void send(httplib::Response &res, int status, const nlohmann::json &body)
    {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    bool authorized(const httplib::Request &req, httplib::Response &res) const
    {
        if (options_.bearer_token.empty())
            return true;
        if (req.get_header_value("Authorization") == "Bearer " + options_.bearer_token)
            return true;
        send(res, 401, error_body("unauthorized", "missing or wrong bearer token"));
        return false;
    }

    void persist(const WorkerResponse &r, bool closed)
    {
        if (options_.persist_dir.empty())
            return;
        std::lock_guard lock(persist_mutex_);
        std::filesystem::create_directories(options_.persist_dir);
        {
            std::ofstream journal(options_.persist_dir / "responses.jsonl", std::ios::app);
            journal << nlohmann::json(r).dump() << '\n';
        }
        if (closed)
            write_file_bytes(options_.persist_dir / "ledger.json", store_.ledger().to_json().dump(2) + "\n");
    }

    void routes()
    {
        server_.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                     {"Access-Control-Allow-Headers", "Authorization, Content-Type"},
                                     {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
        server_.Options(R"(.*)", [](const httplib::Request &, httplib::Response &res) { res.status = 204; });

        if (!options_.asset_dir.empty())
        {
            std::filesystem::create_directories(options_.asset_dir);
            server_.set_mount_point("/assets", options_.asset_dir.string());
        }

        server_.Get("/hits", [this](const httplib::Request &req, httplib::Response &res) {
            if (!authorized(req, res))
                return;
            const std::string status = req.has_param("status") ? req.get_param_value("status") : "all";
            std::vector<std::string> ids;
            if (status == "open")
                ids = store_.open_hits();
            else if (status == "all")
                ids = store_.all_hits();
            else if (status == "closed")
            {
                auto open = store_.open_hits();
                for (auto &id : store_.all_hits())
                    if (!std::binary_search(open.begin(), open.end(), id))
                        ids.push_back(id);
            }
            else
                return send(res, 400, error_body("invalid_argument", "status must be open, closed or all"));
            send(res, 200, {{"status", status}, {"hits", ids}});
        });

        server_.Get(R"(/hits/([^/]+))", [this](const httplib::Request &req, httplib::Response &res) {
            if (!authorized(req, res))
                return;
            try
            {
                send(res, 200, store_.manifest(req.matches[1]));
            }
            catch (const NotFoundError &e)
            {
                send(res, 404, error_body(e.code(), e.what()));
            }
        });

        server_.Post(R"(/hits/([^/]+)/responses)", [this](const httplib::Request &req, httplib::Response &res) {
            if (!authorized(req, res))
                return;
            const std::string hit_id = req.matches[1];
            WorkerResponse    r;
            try
            {
                r = nlohmann::json::parse(req.body).get<WorkerResponse>();
            }
            catch (const nlohmann::json::exception &e)
            {
                return send(res, 400, error_body("invalid_argument", std::string("malformed response: ") + e.what()));
            }
            try
            {
                if (r.hit_id.empty())
                    r.hit_id = hit_id;
                const SubmitResult result = store_.submit(hit_id, r);
                const bool         closed = result.status == SubmitStatus::closed_now;
                persist(r, closed);
                nlohmann::json body = {{"hit_id", hit_id},
                                       {"status", closed ? "closed" : "accepted"},
                                       {"responses", result.distinct_workers},
                                       {"quorum", store_.quorum()}};
                if (result.verdict)
                    body["verdict"] = to_string(*result.verdict);
                if (result.validated)
                    body["validated"] = *result.validated;
                send(res, 201, body);
            }
            catch (const NotFoundError &e)
            {
                send(res, 404, error_body(e.code(), e.what()));
            }
            catch (const ConflictError &e)
            {
                send(res, 409, error_body(e.code(), e.what()));
            }
            catch (const InvalidArgument &e)
            {
                send(res, 400, error_body(e.code(), e.what()));
            }
        });

        server_.Get("/ledger", [this](const httplib::Request &req, httplib::Response &res) {
            if (!authorized(req, res))
                return;
            send(res, 200, store_.ledger().to_json());
        });
    }

    AnnotationStore  &store_;
    ServerOptions     options_;
    httplib::Server   server_;
    std::thread       thread_;
    std::mutex        persist_mutex_;
    int               port_ = -1;
};

} // namespace probe
