// SPDX-License-Identifier: Apache-2.0
//
// probe: command line front end of the spurious-feature pipeline.

#include <probe/pipeline.hpp>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <csignal>
#include <cstdio>
#include <iostream>
#include <string>

namespace {

probe::AnnotationServer *g_server = nullptr;

void on_signal(int)
{
    if (g_server)
        g_server->stop();
}

int exit_code(const std::string &code)
{
    if (code == "invalid_argument")
        return 2;
    if (code == "not_found" || code == "missing_artifact")
        return 3;
    if (code == "conflict")
        return 4;
    if (code == "capability")
        return 5;
    return 1;
}

int fail(const std::string &code, const std::string &message)
{
    std::cerr << probe::error_body(code, message).dump() << std::endl;
    return exit_code(code);
}

void print_result(const probe::StageResult &r)
{
    std::cout << nlohmann::json{{"stage", r.stage},
                                {"up_to_date", r.up_to_date},
                                {"outputs", r.outputs.size()},
                                {"summary", r.summary}}
                     .dump()
              << std::endl;
}

} // namespace

int main(int argc, char **argv)
{
    CLI::App app{"Discover, annotate and evaluate spurious features of image classifiers"};
    app.require_subcommand(1);

    std::string config_path = "probe.toml";
    std::string stage_dir;
    bool        force = false;

    auto add_common = [&](CLI::App *sub) {
        sub->add_option("-c,--config", config_path, "pipeline configuration (TOML)");
        sub->add_option("--stage-dir", stage_dir, "directory for stage artifacts (overrides output.root)");
        sub->add_flag("--force", force, "recompute even when inputs are unchanged");
    };

    std::vector<CLI::App *> stage_cmds;
    for (const auto &name : probe::stage_order())
    {
        auto *sub = app.add_subcommand(name, "run the " + name + " stage");
        add_common(sub);
        stage_cmds.push_back(sub);
    }

    bool        scripted = false;
    std::string endpoint, token;
    auto       *annotate = app.add_subcommand("annotate", "answer open HITs with the ground-truth annotator");
    add_common(annotate);
    annotate->add_flag("--scripted", scripted, "answer in-process and write the ledger");
    annotate->add_option("--endpoint", endpoint, "answer through a running annotation service");
    annotate->add_option("--token", token, "bearer token for --endpoint");

    std::string host = "127.0.0.1";
    int         port = 8080;
    auto       *serve = app.add_subcommand("serve", "serve open HITs over HTTP");
    add_common(serve);
    serve->add_option("--host", host, "bind address");
    serve->add_option("--port", port, "port, 0 for any free port");
    serve->add_option("--token", token, "require this bearer token");

    auto *all = app.add_subcommand("all", "run every stage, annotating with the ground-truth annotator");
    add_common(all);

    std::string         synth_out = "bench";
    probe::PlantConfig  plant;
    probe::TrainConfig  train;
    train.epochs = 12;
    auto *synth  = app.add_subcommand("synth", "generate a planted dataset, train the reference model, write a config");
    synth->add_option("-o,--out", synth_out, "output directory");
    synth->add_option("--seed", plant.seed, "dataset, initialisation and training seed");
    synth->add_option("--images-per-class", plant.images_per_class);
    synth->add_option("--co-occurrence", plant.co_occurrence);
    synth->add_option("--epochs", train.epochs);

    CLI11_PARSE(app, argc, argv);

    try
    {
        if (synth->parsed())
        {
            const auto bench = probe::prepare_synthetic_bench(synth_out, plant, train);
            std::cout << nlohmann::json{{"config", bench.config_path.string()},
                                        {"final_loss", bench.losses.empty() ? 0.0 : bench.losses.back()}}
                             .dump()
                      << std::endl;
            return 0;
        }

        probe::Pipeline pipeline(probe::PipelineConfig::load(config_path), stage_dir);
        pipeline.set_force(force);

        for (std::size_t n = 0; n < stage_cmds.size(); ++n)
            if (stage_cmds[n]->parsed())
            {
                print_result(pipeline.run(probe::stage_order()[n]));
                return 0;
            }

        if (annotate->parsed())
        {
            if (scripted == !endpoint.empty())
                return fail("invalid_argument", "annotate needs exactly one of --scripted or --endpoint");
            std::size_t n = 0;
            if (scripted)
                n = pipeline.annotate_scripted();
            else
                n = pipeline.scripted_annotator().annotate(endpoint, token);
            std::cout << nlohmann::json{{"responses", n}}.dump() << std::endl;
            return 0;
        }

        if (serve->parsed())
        {
            auto                   store = pipeline.annotation_store();
            probe::AnnotationServer server(*store, {token, pipeline.asset_dir(), pipeline.annotation_dir()});
            const int              bound = server.bind(host, port);
            std::cout << nlohmann::json{{"listening", host + ":" + std::to_string(bound)},
                                        {"open_hits", store->open_hits().size()}}
                             .dump()
                      << std::endl;
            g_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            server.listen();
            g_server = nullptr;
            pipeline.save_ledger(*store);
            return 0;
        }

        if (all->parsed())
        {
            for (const char *stage : {"extract", "select", "hits"})
                print_result(pipeline.run(stage));
            pipeline.annotate_scripted();
            print_result(pipeline.run("subsets"));
            pipeline.annotate_scripted();
            for (const char *stage : {"subsets", "dataset", "evaluate", "report"})
                print_result(pipeline.run(stage));
            return 0;
        }
    }
    catch (const probe::Error &e)
    {
        return fail(e.code(), e.what());
    }
    catch (const std::exception &e)
    {
        return fail("internal", e.what());
    }
    return 0;
}
