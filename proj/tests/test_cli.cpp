#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ehs/binio.hpp"
#include "ehs/checkpoint.hpp"
#include "ehs/corpus.hpp"
#include "ehs/error.hpp"

using namespace ehs;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CmdResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch_root() {
    return fs::temp_directory_path() / "ehs_test_cli";
}

CmdResult run_cli(const std::vector<std::string>& args) {
    static int invocation = 0;
    auto dir = scratch_root() / "io";
    fs::create_directories(dir);
    auto out_file = dir / ("out." + std::to_string(invocation));
    auto err_file = dir / ("err." + std::to_string(invocation));
    ++invocation;

    std::string cmd = EHS_CLI_PATH;
    for (const auto& a : args) cmd += " '" + a + "'";
    cmd += " >" + out_file.string() + " 2>" + err_file.string();
    int rc = std::system(cmd.c_str());

    CmdResult r;
    r.code = rc >= 0 && WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = slurp(out_file);
    r.err = slurp(err_file);
    return r;
}

fs::path fresh_dir(const std::string& name) {
    auto dir = scratch_root() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    out << j.dump(2) << "\n";
}

json micro_corpus_json(int n_speakers, uint64_t seed) {
    return {{"n_speakers", n_speakers},
            {"min_sessions_per_speaker", 1},
            {"max_sessions_per_speaker", 1},
            {"min_responses_per_session", 1},
            {"max_responses_per_session", 1},
            {"min_response_seconds", 1.3},
            {"max_response_seconds", 1.8},
            {"seed", seed},
            {"label_noise_std", 0.0}};
}

json micro_pipeline_json() {
    return {{"features", {{"n_mels", 16}}},
            {"encoder", {{"conv_channels", {2, 3}}, {"lstm_hidden", {8}}}},
            {"decoder", {{"alphabet", 10}, {"embed_dim", 4}, {"hidden", 8}, {"att_dim", 4}}},
            {"head", {{"rnn_hidden", 4}, {"proj_dim", 3}, {"embed_dim", 4}}},
            {"lstm_head", {{"hidden", 6}, {"embed_dim", 4}}},
            {"fusion", {{"hidden", 4}}}};
}

int count_lines(const std::string& text) {
    int n = 0;
    for (char c : text) n += c == '\n';
    return n;
}

// Drops the leading "# seed=... config=..." comment so outputs written to
// different directories can still be compared (out_dir is part of the config).
std::string below_header(const std::string& text) {
    auto nl = text.find('\n');
    return nl == std::string::npos ? text : text.substr(nl + 1);
}

// Generates a corpus directory + manifest in-process and returns the sessions.
std::vector<Session> seed_corpus(const fs::path& dir, int n_speakers, uint64_t seed) {
    SyntheticCorpusConfig cfg;
    cfg.n_speakers = n_speakers;
    cfg.min_sessions_per_speaker = 1;
    cfg.max_sessions_per_speaker = 1;
    cfg.min_responses_per_session = 1;
    cfg.max_responses_per_session = 1;
    cfg.min_response_seconds = 1.3;
    cfg.max_response_seconds = 1.8;
    cfg.label_noise_std = 0.0;
    cfg.seed = seed;
    auto sessions = generate_synthetic_corpus(cfg, dir.string());
    save_manifest((dir / "manifest.jsonl").string(), sessions);
    return sessions;
}

// First corpus seed whose train/dev/test splits all contain both classes.
std::vector<Session> seed_corpus_with_classes(const fs::path& dir, int n_speakers,
                                              int min_per_class = 1) {
    for (uint64_t seed = 1; seed <= 80; ++seed) {
        fs::remove_all(dir);
        fs::create_directories(dir);
        auto sessions = seed_corpus(dir, n_speakers, seed);
        bool ok = true;
        for (const char* split : {"train", "dev", "test"}) {
            int pos = 0, neg = 0;
            for (const auto& s : sessions) {
                if (s.split != split) continue;
                (phq8_to_binary(s.phq8) ? pos : neg) += 1;
            }
            ok = ok && pos >= min_per_class && neg >= min_per_class;
        }
        if (ok) return sessions;
    }
    REQUIRE_MESSAGE(false, "no corpus seed in 1..80 gave two-class splits");
    return {};
}

} // namespace

TEST_CASE("gen-corpus writes a reproducible corpus and honors --force") {
    auto base = fresh_dir("gen");
    auto cfg_path = base / "config.json";
    write_json(cfg_path, json{{"corpus", micro_corpus_json(6, 3)}});
    auto out_a = (base / "a").string();

    auto r = run_cli({"gen-corpus", "--config", cfg_path.string(), "--out", out_a});
    REQUIRE(r.code == 0);
    CHECK(r.out.rfind("# seed=3 ", 0) == 0);
    CHECK(r.out.find("stat,train+dep,train-dep,dev+dep,dev-dep,test+dep,test-dep,total") !=
          std::string::npos);

    auto manifest = slurp(fs::path(out_a) / "manifest.jsonl");
    auto sessions = load_manifest((fs::path(out_a) / "manifest.jsonl").string());
    CHECK(count_lines(manifest) == static_cast<int>(sessions.size()));
    CHECK(fs::exists(fs::path(out_a) / "stats.csv"));
    CHECK(fs::exists(fs::path(out_a) / "run.json"));

    // Occupied directory refused without --force, replaced with it.
    auto r2 = run_cli({"gen-corpus", "--config", cfg_path.string(), "--out", out_a});
    CHECK(r2.code == 2);
    CHECK(r2.err.find("--force") != std::string::npos);
    auto r3 = run_cli({"gen-corpus", "--config", cfg_path.string(), "--out", out_a, "--force"});
    CHECK(r3.code == 0);

    // Same seed elsewhere: byte-identical manifest and audio.
    auto out_b = (base / "b").string();
    REQUIRE(run_cli({"gen-corpus", "--config", cfg_path.string(), "--out", out_b}).code == 0);
    CHECK(slurp(fs::path(out_b) / "manifest.jsonl") == manifest);
    auto first_wav = sessions.front().responses.front().wav_path;
    CHECK(slurp(fs::path(out_a) / first_wav) == slurp(fs::path(out_b) / first_wav));
    CHECK(slurp(fs::path(out_a) / first_wav).size() > 1000);

    // A different seed changes the data.
    write_json(cfg_path, json{{"corpus", micro_corpus_json(6, 4)}});
    auto out_c = (base / "c").string();
    REQUIRE(run_cli({"gen-corpus", "--config", cfg_path.string(), "--out", out_c}).code == 0);
    CHECK(slurp(fs::path(out_c) / "manifest.jsonl") != manifest);
}

TEST_CASE("featurize fills the cache once") {
    auto base = fresh_dir("featurize");
    auto corpus = base / "corpus";
    fs::create_directories(corpus);
    seed_corpus(corpus, 5, 1);
    auto cfg_path = base / "config.json";
    write_json(cfg_path,
               json{{"pipeline", micro_pipeline_json()}, {"corpus_dir", corpus.string()}});

    auto r = run_cli({"featurize", "--config", cfg_path.string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("wrote 10 feature files") != std::string::npos); // 5 full + 5 segment
    auto r2 = run_cli({"featurize", "--config", cfg_path.string()});
    CHECK(r2.out.find("wrote 0 feature files") != std::string::npos);
    CHECK(fs::exists(corpus / "features" / "run.json"));
}

TEST_CASE("pretrain: checkpoint metadata, logs, determinism, overrides") {
    auto base = fresh_dir("pretrain");
    auto corpus = base / "corpus";
    fs::create_directories(corpus);
    seed_corpus(corpus, 8, 1);
    auto cfg_path = base / "config.json";
    write_json(cfg_path, json{{"pipeline", micro_pipeline_json()},
                              {"corpus_dir", corpus.string()},
                              {"pretrain",
                               {{"batch_size", 4},
                                {"max_epochs", 1},
                                {"patience", 2},
                                {"lr", 1e-3}}}});

    auto out_a = (base / "a").string();
    auto r = run_cli({"pretrain", "--config", cfg_path.string(), "--out", out_a, "--seed", "5"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.find("epoch,train_loss,dev_loss,dev_cer") != std::string::npos);
    CHECK(fs::exists(fs::path(out_a) / "pretrain_log.csv"));

    auto ck = load_checkpoint((fs::path(out_a) / "checkpoint.ehck").string());
    CHECK(ck.meta.model == "asr");
    CHECK(ck.meta.seed == 5);
    CHECK(ck.meta.freeze_policy == "tl1");

    // Bitwise reproducibility: same seed + same out dir reruns byte-identically,
    // and a different out dir only changes the embedded config header.
    auto ck_bytes = slurp(fs::path(out_a) / "checkpoint.ehck");
    auto log_bytes = slurp(fs::path(out_a) / "pretrain_log.csv");
    REQUIRE(run_cli({"pretrain", "--config", cfg_path.string(), "--out", out_a, "--seed", "5"})
                .code == 0);
    CHECK(slurp(fs::path(out_a) / "checkpoint.ehck") == ck_bytes);
    CHECK(slurp(fs::path(out_a) / "pretrain_log.csv") == log_bytes);
    auto out_b = (base / "b").string();
    REQUIRE(run_cli({"pretrain", "--config", cfg_path.string(), "--out", out_b, "--seed", "5"})
                .code == 0);
    CHECK(slurp(fs::path(out_b) / "checkpoint.ehck") == ck_bytes);
    CHECK(below_header(slurp(fs::path(out_b) / "pretrain_log.csv")) == below_header(log_bytes));

    // Policy flag lands in the checkpoint metadata.
    auto out_c = (base / "c").string();
    REQUIRE(run_cli({"pretrain", "--config", cfg_path.string(), "--out", out_c, "--seed", "5",
                     "--freeze-policy", "tl2"})
                .code == 0);
    CHECK(load_checkpoint((fs::path(out_c) / "checkpoint.ehck").string()).meta.freeze_policy ==
          "tl2");

    // A response without a transcript is a data error naming the session.
    auto sessions = load_manifest((corpus / "manifest.jsonl").string());
    auto broken = sessions;
    broken[0].responses[0].transcript.clear();
    save_manifest((corpus / "manifest.jsonl").string(), broken);
    auto r_bad = run_cli({"pretrain", "--config", cfg_path.string(), "--out",
                          (base / "d").string()});
    CHECK(r_bad.code == 3);
    CHECK(r_bad.err.find(broken[0].session_id) != std::string::npos);
    save_manifest((corpus / "manifest.jsonl").string(), sessions);
}

TEST_CASE("train, evaluate, predict: artifacts, hygiene, reproducibility") {
    auto base = fresh_dir("flow");
    auto corpus = base / "corpus";
    auto sessions = seed_corpus_with_classes(corpus, 16);
    int dev_sessions = 0;
    for (const auto& s : sessions) dev_sessions += s.split == "dev" ? 1 : 0;

    auto cfg_path = base / "config.json";
    json cfg{{"pipeline", micro_pipeline_json()},
             {"corpus_dir", corpus.string()},
             {"pretrain",
              {{"batch_size", 4}, {"max_epochs", 0}, {"patience", 1}, {"lr", 1e-3}}},
             {"downstream",
              {{"batch_size", 4}, {"max_epochs", 1}, {"patience", 2}, {"lr", 1e-3}}},
             {"model", (base / "model" / "model.ehck").string()}};
    write_json(cfg_path, cfg);

    auto model_dir = (base / "model").string();
    auto r = run_cli({"train", "--config", cfg_path.string(), "--out", model_dir, "--seed", "7",
                      "--arm", "scratch"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(fs::exists(fs::path(model_dir) / "model.ehck"));
    CHECK(fs::exists(fs::path(model_dir) / "stage1_log.csv"));
    CHECK(r.out.find("epoch,train_loss,dev_auc") != std::string::npos);
    auto ck = load_checkpoint((fs::path(model_dir) / "model.ehck").string());
    CHECK(ck.meta.model == "downstream/scratch");
    CHECK(ck.meta.task == "classification");

    SUBCASE("evaluate honors test hygiene and reproduces bytes") {
        auto eval_dir = (base / "eval").string();
        auto e1 = run_cli({"evaluate", "--config", cfg_path.string(), "--out", eval_dir,
                           "--split", "dev"});
        REQUIRE_MESSAGE(e1.code == 0, e1.err);
        CHECK(e1.out.find("EH-AC/dev") != std::string::npos);
        CHECK(e1.out.find("row,auc,sensitivity,specificity") != std::string::npos);
        auto report = slurp(fs::path(eval_dir) / "report.csv");
        CHECK(report == e1.out);

        auto blocked = run_cli({"evaluate", "--config", cfg_path.string(), "--out",
                                (base / "eval_final").string(), "--split", "test"});
        CHECK(blocked.code == 2);
        CHECK(blocked.err.find("--final") != std::string::npos);
        auto final_run = run_cli({"evaluate", "--config", cfg_path.string(), "--out",
                                  (base / "eval_final").string(), "--split", "test", "--final"});
        CHECK(final_run.code == 0);
        CHECK(final_run.out.find("EH-AC/test") != std::string::npos);

        auto e2 = run_cli({"evaluate", "--config", cfg_path.string(), "--out",
                           (base / "eval2").string(), "--split", "dev"});
        CHECK(below_header(e2.out) == below_header(e1.out));
        CHECK(slurp(fs::path(base / "eval2") / "report.json") ==
              slurp(fs::path(eval_dir) / "report.json"));
    }

    SUBCASE("predict emits one probability row per session") {
        auto pred_dir = (base / "pred").string();
        auto p = run_cli({"predict", "--config", cfg_path.string(), "--out", pred_dir, "--split",
                          "dev"});
        REQUIRE_MESSAGE(p.code == 0, p.err);
        std::istringstream lines(p.out);
        std::string line;
        std::getline(lines, line);
        CHECK(line.rfind("# seed=", 0) == 0);
        std::getline(lines, line);
        CHECK(line == "session_id,probability,class");
        int rows = 0;
        while (std::getline(lines, line)) {
            ++rows;
            auto c1 = line.find(','), c2 = line.rfind(',');
            REQUIRE(c1 != std::string::npos);
            REQUIRE(c2 != c1);
            double prob = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
            int cls = std::stoi(line.substr(c2 + 1));
            CHECK(prob >= 0.0);
            CHECK(prob <= 1.0);
            CHECK((cls == 0 || cls == 1));
            CHECK((prob >= 0.5) == (cls == 1));
        }
        CHECK(rows == dev_sessions);
    }

    SUBCASE("transfer arms require a checkpoint and accept one") {
        auto no_ck = run_cli({"train", "--config", cfg_path.string(), "--out",
                              (base / "tl").string(), "--arm", "tl1"});
        CHECK(no_ck.code == 2);
        CHECK(no_ck.err.find("checkpoint") != std::string::npos);

        auto pre_dir = (base / "pre").string();
        REQUIRE(run_cli({"pretrain", "--config", cfg_path.string(), "--out", pre_dir}).code == 0);
        json cfg_tl = cfg;
        cfg_tl["checkpoint"] = (fs::path(pre_dir) / "checkpoint.ehck").string();
        auto cfg_tl_path = base / "config_tl.json";
        write_json(cfg_tl_path, cfg_tl);
        auto tl = run_cli({"train", "--config", cfg_tl_path.string(), "--out",
                           (base / "tl").string(), "--arm", "tl1"});
        REQUIRE_MESSAGE(tl.code == 0, tl.err);
        CHECK(load_checkpoint((fs::path(base / "tl") / "model.ehck").string()).meta.model ==
              "downstream/tl1");
    }

    SUBCASE("regression task flows through to reports and predictions") {
        auto reg_dir = (base / "reg").string();
        auto t = run_cli({"train", "--config", cfg_path.string(), "--out", reg_dir, "--arm",
                          "scratch", "--task", "reg"});
        REQUIRE_MESSAGE(t.code == 0, t.err);
        CHECK(t.out.find("epoch,train_loss,dev_rmse") != std::string::npos);

        json cfg_reg = cfg;
        cfg_reg["model"] = (fs::path(reg_dir) / "model.ehck").string();
        auto cfg_reg_path = base / "config_reg.json";
        write_json(cfg_reg_path, cfg_reg);
        auto p = run_cli({"predict", "--config", cfg_reg_path.string(), "--out",
                          (base / "regp").string(), "--split", "dev"});
        REQUIRE_MESSAGE(p.code == 0, p.err);
        CHECK(p.out.find("session_id,predicted_phq8,class") != std::string::npos);
        auto e = run_cli({"evaluate", "--config", cfg_reg_path.string(), "--out",
                          (base / "rege").string(), "--split", "dev"});
        REQUIRE_MESSAGE(e.code == 0, e.err);
        auto rj = json::parse(slurp(fs::path(base / "rege") / "report.json"));
        REQUIRE(rj.is_array());
        REQUIRE(rj.size() == 1);
        CHECK(rj[0].contains("rmse"));
        CHECK(rj[0].contains("mae"));
        CHECK(!rj[0].contains("auc"));
    }
}

TEST_CASE("experiment subcommand emits the comparison summary") {
    auto base = fresh_dir("experiment");
    auto corpus = base / "corpus";
    seed_corpus_with_classes(corpus, 30, 2);
    auto cfg_path = base / "config.json";
    write_json(cfg_path,
               json{{"pipeline", micro_pipeline_json()},
                    {"corpus_dir", corpus.string()},
                    {"pretrain",
                     {{"batch_size", 4}, {"max_epochs", 1}, {"patience", 2}, {"lr", 1e-3}}},
                    {"downstream",
                     {{"batch_size", 4}, {"max_epochs", 1}, {"patience", 2}, {"lr", 1e-3}}},
                    {"experiment", {{"arms", {"scratch", "tl1"}}, {"seeds", {1, 2, 3}}}}});

    auto out = (base / "out").string();
    auto r = run_cli({"experiment", "--config", cfg_path.string(), "--out", out});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.find("EH-AC/test") != std::string::npos);
    CHECK(r.out.find("EH-AC+TL-1/test") != std::string::npos);

    auto j = json::parse(slurp(fs::path(out) / "summary.json"));
    CHECK(j["runs"].size() == 6);
    CHECK(j["comparisons"].size() == 3);
    for (const auto& run : j["runs"]) {
        if (run.at("arm") == "tl1") CHECK(run.contains("pretrain_cer"));
        if (run.at("arm") == "scratch") CHECK(!run.contains("pretrain_cer"));
    }
    CHECK(fs::exists(fs::path(out) / "summary.csv"));
    CHECK(fs::exists(fs::path(out) / "run.json"));
}

TEST_CASE("config and data errors map to documented exit codes") {
    auto base = fresh_dir("errors");
    auto cfg_path = base / "config.json";

    write_json(cfg_path, json{{"pipeline", {{"encoder", {{"conv_chans", {2, 3}}}}}}});
    auto unknown = run_cli({"pretrain", "--config", cfg_path.string(), "--out",
                            (base / "o").string()});
    CHECK(unknown.code == 2);
    CHECK(unknown.err.find("conv_chans") != std::string::npos);

    write_json(cfg_path, json{{"pretrain", {{"freeze_policy", "tl9"}}}});
    CHECK(run_cli({"pretrain", "--config", cfg_path.string(), "--out", (base / "o").string()})
              .code == 2);

    write_json(cfg_path, json{{"corpus_dir", (base / "missing").string()}});
    auto missing = run_cli({"pretrain", "--config", cfg_path.string(), "--out",
                            (base / "o").string()});
    CHECK(missing.code == 3);

    auto no_cfg = run_cli({"train", "--config", (base / "nope.json").string(), "--out",
                           (base / "o").string()});
    CHECK(no_cfg.code == 2);

    auto bad_flag = run_cli({"evaluate", "--split", "validation"});
    CHECK(bad_flag.code == 2);
}

TEST_CASE("gradcheck validates every backward rule") {
    auto r = run_cli({"gradcheck"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("encoder+decoder hybrid loss") != std::string::npos);
    CHECK(r.out.find("fusion mlp") != std::string::npos);
    CHECK(r.out.find("FAIL") == std::string::npos);
    CHECK(r.out.find("gradcheck OK") != std::string::npos);
}
