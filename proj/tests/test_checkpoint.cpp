#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ehs/binio.hpp"
#include "ehs/checkpoint.hpp"
#include "ehs/error.hpp"
#include "ehs/losses.hpp"
#include "ehs/models.hpp"
#include "ehs/optim.hpp"
#include "ehs/params.hpp"
#include "ehs/rng.hpp"

using namespace ehs;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir() {
    auto dir = fs::temp_directory_path() / "ehs_test_checkpoint";
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

EncoderConfig micro_encoder() {
    EncoderConfig cfg;
    cfg.conv_channels = {2, 3};
    cfg.n_mels = 9;
    cfg.lstm_hidden = {4};
    return cfg;
}

AsrDecoderConfig micro_decoder() {
    AsrDecoderConfig cfg;
    cfg.alphabet = 4;
    cfg.embed_dim = 5;
    cfg.hidden = 6;
    cfg.att_dim = 3;
    return cfg;
}

RcnnHeadConfig micro_head() {
    RcnnHeadConfig cfg;
    cfg.rnn_hidden = 3;
    cfg.proj_dim = 2;
    cfg.embed_dim = 4;
    return cfg;
}

ParamList build_pretrain(const EncoderConfig& ecfg, const AsrDecoderConfig& dcfg, Rng& rng) {
    ParamList ps = init_encoder(ecfg, rng);
    auto dec = init_asr_decoder(dcfg, ecfg.out_dim(), rng);
    ps.insert(ps.end(), dec.begin(), dec.end());
    return ps;
}

ParamList build_downstream(const EncoderConfig& ecfg, const RcnnHeadConfig& hcfg, Rng& rng) {
    ParamList ps = init_encoder(ecfg, rng);
    auto head = init_rcnn_head(hcfg, ecfg.out_dim(), rng);
    ps.insert(ps.end(), head.begin(), head.end());
    return ps;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    return a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::map<std::string, std::vector<double>> values_of(const ParamList& ps) {
    std::map<std::string, std::vector<double>> m;
    for (const auto& p : ps) m[p.name] = p.t->data;
    return m;
}

TensorPtr random_features(Rng& rng, int frames, int n_mels) {
    auto t = tensor({frames, n_mels});
    for (auto& v : t->data) v = rng.gaussian(0.0, 1.0);
    return t;
}

void make_trainable(ParamList& ps) {
    for (auto& p : ps) p.t->requires_grad = true;
}

// One hybrid-loss pretraining step's backward pass on random features.
void asr_backward(ParamList& ps, const EncoderConfig& ecfg, const AsrDecoderConfig& dcfg,
                  Rng& rng) {
    zero_grads(ps);
    auto feats = random_features(rng, 15, ecfg.n_mels);
    auto enc = encoder_forward(ps, ecfg, feats);
    std::vector<int> labels = {1, 3};
    auto out = asr_forward(ps, dcfg, enc, labels);
    auto loss = hybrid_loss(ctc_loss(log_softmax_rows(out.ctc_logits), labels),
                            attention_ce(out.att_logits, labels), 0.5);
    backward(loss);
}

} // namespace

TEST_CASE("checkpoint round trip is bitwise exact") {
    auto dir = fresh_dir();
    auto ecfg = micro_encoder();
    auto dcfg = micro_decoder();
    Rng rng(11);
    auto ps = build_pretrain(ecfg, dcfg, rng);

    // Stress payload encoding with awkward doubles: signed zero, denormals,
    // extreme magnitudes.
    auto stress = tensor({2, 4}, {0.0, -0.0, 4.9406564584124654e-324, -2.2250738585072014e-308,
                                  1.7976931348623157e308, -3.141592653589793, 1e-45, 42.0});
    ps.push_back({"encoder.stress", stress, true});
    auto f32t = tensor({3}, {0.5, -1.25, 1024.0}, DType::f32);
    ps.push_back({"encoder.small", f32t, true});

    CheckpointMeta meta;
    meta.model = "asr";
    meta.task = task_name(TaskKind::classification);
    meta.config_fingerprint = 0xDEADBEEFCAFEF00Dull;
    meta.seed = 42;
    meta.step = 1234;
    meta.freeze_policy = "tl2";

    auto path = (dir / "model.ehck").string();
    save_checkpoint(ps, meta, path);
    auto loaded = load_checkpoint(path);

    CHECK(loaded.meta.model == "asr");
    CHECK(loaded.meta.task == std::string(task_name(TaskKind::classification)));
    CHECK(loaded.meta.config_fingerprint == 0xDEADBEEFCAFEF00Dull);
    CHECK(loaded.meta.seed == 42);
    CHECK(loaded.meta.step == 1234);
    CHECK(loaded.meta.freeze_policy == "tl2");

    REQUIRE(loaded.tensors.size() == ps.size());
    for (size_t i = 0; i < ps.size(); ++i) {
        const auto& t = loaded.tensors[i];
        CHECK(t.name == ps[i].name);
        CHECK(t.dtype == ps[i].t->dtype);
        CHECK(t.shape == ps[i].t->shape);
        CHECK(bits_equal(t.data, ps[i].t->data));
    }
    CHECK(loaded.find("encoder.stress") != nullptr);
    CHECK(loaded.find("no.such.tensor") == nullptr);

    SUBCASE("saving the loaded checkpoint reproduces the file byte for byte") {
        auto path2 = (dir / "model2.ehck").string();
        save_checkpoint(loaded, path2);
        CHECK(read_file_bytes(path) == read_file_bytes(path2));
    }

    SUBCASE("restore into a perturbed model recovers every value") {
        auto snap = snapshot(ps, meta);
        auto before = values_of(ps);
        for (auto& p : ps)
            for (auto& v : p.t->data) v += 0.5;
        restore_params(snap, ps);
        for (const auto& p : ps) CHECK(bits_equal(p.t->data, before[p.name]));
    }

    SUBCASE("restore refuses mismatched models without touching them") {
        auto snap = snapshot(ps, meta);
        Rng r2(3);
        auto other = build_downstream(ecfg, micro_head(), r2);
        auto before = values_of(other);
        CHECK_THROWS_AS(restore_params(snap, other), ConfigError);
        ps[2].t->shape[0] += 1; // corrupt one shape in the live model
        CHECK_THROWS_AS(restore_params(snap, ps), ShapeError);
        ps[2].t->shape[0] -= 1;
        for (const auto& p : other) CHECK(bits_equal(p.t->data, before[p.name]));
    }
}

TEST_CASE("corrupt checkpoints are rejected with distinct errors") {
    auto dir = fresh_dir();
    Rng rng(7);
    auto ecfg = micro_encoder();
    auto ps = build_pretrain(ecfg, micro_decoder(), rng);
    auto path = (dir / "m.ehck").string();
    save_checkpoint(ps, CheckpointMeta{}, path);
    const auto pristine = read_file_bytes(path);

    auto write_variant = [&](std::vector<uint8_t> bytes) {
        auto p = (dir / "variant.ehck").string();
        write_file_bytes(p, bytes);
        return p;
    };

    SUBCASE("flipped payload byte fails the checksum") {
        auto bytes = pristine;
        bytes[bytes.size() - 20] ^= 0x01; // inside the tensor payload
        CHECK_THROWS_AS(load_checkpoint(write_variant(bytes)), ChecksumError);
    }
    SUBCASE("flipped metadata byte fails the checksum") {
        auto bytes = pristine;
        bytes[14] ^= 0x40; // inside the JSON metadata block
        CHECK_THROWS_AS(load_checkpoint(write_variant(bytes)), ChecksumError);
    }
    SUBCASE("future format version is a version error even when otherwise intact") {
        auto bytes = pristine;
        bytes[4] = 99; // version field, little-endian
        CHECK_THROWS_AS(load_checkpoint(write_variant(bytes)), VersionError);
    }
    SUBCASE("bad magic is a format error") {
        auto bytes = pristine;
        bytes[0] = 'X';
        CHECK_THROWS_WITH_AS(load_checkpoint(write_variant(bytes)), doctest::Contains("magic"),
                             FormatError);
    }
    SUBCASE("truncated files are format errors") {
        CHECK_THROWS_AS(load_checkpoint(write_variant({})), FormatError);
        auto head = pristine;
        head.resize(10);
        CHECK_THROWS_WITH_AS(load_checkpoint(write_variant(head)), doctest::Contains("truncated"),
                             FormatError);
        auto half = pristine;
        half.resize(half.size() / 2);
        CHECK_THROWS_AS(load_checkpoint(write_variant(half)), FormatError);
    }
    SUBCASE("trailing bytes break the checksum frame") {
        auto bytes = pristine;
        bytes.push_back(0x00);
        CHECK_THROWS_AS(load_checkpoint(write_variant(bytes)), ChecksumError);
    }
    SUBCASE("missing file is a data error") {
        CHECK_THROWS_AS(load_checkpoint((dir / "absent.ehck").string()), DataError);
    }
}

TEST_CASE("encoder transfer copies all and only encoder weights") {
    auto dir = fresh_dir();
    auto ecfg = micro_encoder();
    auto hcfg = micro_head();
    Rng r1(21), r2(22);
    auto pretrain = build_pretrain(ecfg, micro_decoder(), r1);
    auto path = (dir / "pre.ehck").string();
    CheckpointMeta meta;
    meta.model = "asr";
    save_checkpoint(pretrain, meta, path);
    auto source = load_checkpoint(path);

    auto dst = build_downstream(ecfg, hcfg, r2);
    auto before = values_of(dst);
    auto rep = transfer_encoder(source, dst);

    int64_t encoder_scalars = 0;
    int changed = 0;
    std::vector<std::string> expect_names;
    for (const auto& p : dst) {
        if (p.name.rfind("encoder.", 0) == 0) {
            expect_names.push_back(p.name);
            encoder_scalars += p.t->numel();
            CHECK(bits_equal(p.t->data, source.find(p.name)->data));
            if (!bits_equal(p.t->data, before[p.name])) ++changed;
        } else {
            CHECK(bits_equal(p.t->data, before[p.name])); // untouched
        }
    }
    CHECK(changed > 0); // the two inits really were different weights
    CHECK(rep.copied == expect_names);
    CHECK(rep.scalars == encoder_scalars);
    CHECK(rep.scalars == parameter_census(dst).count("encoder"));

    SUBCASE("a destination that still has a decoder is rejected") {
        CHECK_THROWS_WITH_AS(transfer_encoder(source, pretrain),
                             doctest::Contains("decoder-free"), ConfigError);
    }
    SUBCASE("shape mismatch aborts atomically") {
        EncoderConfig wide = ecfg;
        wide.lstm_hidden = {5};
        Rng r3(23);
        auto other = build_downstream(wide, hcfg, r3);
        auto pre = values_of(other);
        CHECK_THROWS_AS(transfer_encoder(source, other), ShapeError);
        for (const auto& p : other) CHECK(bits_equal(p.t->data, pre[p.name]));
    }
    SUBCASE("source missing an encoder tensor aborts atomically") {
        auto partial = source;
        for (auto it = partial.tensors.begin(); it != partial.tensors.end(); ++it) {
            if (it->name.rfind("encoder.", 0) == 0) {
                partial.tensors.erase(it);
                break;
            }
        }
        auto pre = values_of(dst);
        CHECK_THROWS_WITH_AS(transfer_encoder(partial, dst), doctest::Contains("source lacks"),
                             ConfigError);
        for (const auto& p : dst) CHECK(bits_equal(p.t->data, pre[p.name]));
    }
    SUBCASE("destination missing an encoder tensor aborts atomically") {
        auto smaller = dst;
        for (auto it = smaller.begin(); it != smaller.end(); ++it) {
            if (it->name.rfind("encoder.", 0) == 0) {
                smaller.erase(it);
                break;
            }
        }
        auto pre = values_of(smaller);
        CHECK_THROWS_WITH_AS(transfer_encoder(source, smaller),
                             doctest::Contains("destination lacks"), ConfigError);
        for (const auto& p : smaller) CHECK(bits_equal(p.t->data, pre[p.name]));
    }
    SUBCASE("source with no encoder namespace is rejected") {
        Checkpoint headless;
        headless.tensors.push_back({"head.out.w", DType::f64, {2, 1}, {0.0, 0.0}});
        CHECK_THROWS_AS(transfer_encoder(headless, dst), ConfigError);
    }
}

TEST_CASE("freeze policies gate which parameters the optimizer updates") {
    auto ecfg = micro_encoder();
    auto dcfg = micro_decoder();

    SUBCASE("tl2: decoder and ctc head stay at initialization through 100 steps") {
        Rng rng(31);
        auto ps = build_pretrain(ecfg, dcfg, rng);
        make_trainable(ps);
        apply_freeze(ps, FreezePolicy::TL2_freeze_decoder);
        auto init = values_of(ps);
        Adam adam;
        Rng data_rng(32);
        for (int step = 0; step < 100; ++step) {
            asr_backward(ps, ecfg, dcfg, data_rng);
            adam.step(ps);
        }
        bool encoder_moved = false;
        for (const auto& p : ps) {
            if (p.name.rfind("decoder.", 0) == 0 || p.name.rfind("ctc_head.", 0) == 0) {
                CHECK(bits_equal(p.t->data, init[p.name]));
                CHECK_FALSE(p.trainable);
            } else {
                CHECK(p.trainable);
                if (!bits_equal(p.t->data, init[p.name])) encoder_moved = true;
            }
        }
        CHECK(encoder_moved);
    }

    SUBCASE("tl1: one step applies the textbook bias-corrected update everywhere") {
        Rng rng(41);
        auto ps = build_pretrain(ecfg, dcfg, rng);
        make_trainable(ps);
        apply_freeze(ps, FreezePolicy::TL1_update_all);
        for (const auto& p : ps) CHECK(p.trainable);

        auto w0 = values_of(ps);
        Rng data_rng(42);
        asr_backward(ps, ecfg, dcfg, data_rng);
        auto grads = values_of(ps); // sizes match; copy the grad buffers instead
        for (auto& p : ps) grads[p.name] = p.t->grad;

        AdamConfig acfg;
        Adam adam(acfg);
        adam.step(ps);

        bool decoder_moved = false;
        for (const auto& p : ps) {
            const auto& g = grads[p.name];
            REQUIRE(g.size() == p.t->data.size());
            for (size_t j = 0; j < g.size(); ++j) {
                // First Adam step with bias correction reduces to
                // w - lr * g / (sqrt(g^2) + eps).
                double expect = w0[p.name][j] -
                                acfg.lr * g[j] / (std::sqrt(g[j] * g[j]) + acfg.eps);
                CHECK(p.t->data[j] == doctest::Approx(expect).epsilon(1e-12));
            }
            if (p.name.rfind("decoder.", 0) == 0 && !bits_equal(p.t->data, w0[p.name]))
                decoder_moved = true;
        }
        CHECK(decoder_moved);
    }

    SUBCASE("freeze_encoder: encoder constant downstream, frozen leaves need no grads") {
        auto hcfg = micro_head();
        Rng rng(51);
        auto ps = build_downstream(ecfg, hcfg, rng);
        make_trainable(ps);
        apply_freeze(ps, FreezePolicy::freeze_encoder);
        // Frozen leaves can opt out of autograd entirely; Adam must not
        // demand gradients for them.
        for (auto& p : ps)
            if (!p.trainable) p.t->requires_grad = false;

        auto init = values_of(ps);
        Adam adam;
        Rng data_rng(52);
        for (int step = 0; step < 5; ++step) {
            zero_grads(ps);
            auto out = rcnn_forward(ps, hcfg, encoder_forward(ps, ecfg, random_features(data_rng, 12, ecfg.n_mels)));
            backward(downstream_loss(out.prediction, 1.0, TaskKind::classification));
            adam.step(ps);
        }
        bool head_moved = false;
        for (const auto& p : ps) {
            if (p.name.rfind("encoder.", 0) == 0) {
                CHECK(bits_equal(p.t->data, init[p.name]));
            } else if (!bits_equal(p.t->data, init[p.name])) {
                head_moved = true;
            }
        }
        CHECK(head_moved);
    }

    SUBCASE("policies demand the namespaces they act on") {
        Rng rng(61);
        auto downstream = build_downstream(ecfg, micro_head(), rng);
        CHECK_THROWS_AS(apply_freeze(downstream, FreezePolicy::TL2_freeze_decoder), ConfigError);
        CHECK_THROWS_AS(apply_freeze(downstream, FreezePolicy::TL1_update_all), ConfigError);

        LstmHeadConfig lcfg;
        lcfg.hidden = 3;
        lcfg.embed_dim = 2;
        auto baseline = init_lstm_head(lcfg, 9, rng);
        CHECK_THROWS_AS(apply_freeze(baseline, FreezePolicy::freeze_encoder), ConfigError);
        CHECK_THROWS_AS(apply_freeze(baseline, FreezePolicy::finetune_encoder), ConfigError);
    }

    SUBCASE("policy names round-trip and reject unknowns") {
        for (auto p : {FreezePolicy::TL1_update_all, FreezePolicy::TL2_freeze_decoder,
                       FreezePolicy::finetune_encoder, FreezePolicy::freeze_encoder}) {
            CHECK(freeze_policy_from_string(freeze_policy_name(p)) == p);
        }
        CHECK(freeze_policy_from_string("tl1_update_all") == FreezePolicy::TL1_update_all);
        CHECK(freeze_policy_from_string("tl2_freeze_decoder") == FreezePolicy::TL2_freeze_decoder);
        CHECK_THROWS_AS(freeze_policy_from_string("tl3"), ConfigError);
        CHECK_THROWS_AS(freeze_policy_from_string(""), ConfigError);
    }
}

TEST_CASE("census separates the pretraining and runtime models") {
    EncoderConfig ecfg; // library defaults
    AsrDecoderConfig dcfg;
    RcnnHeadConfig hcfg;
    Rng rng(71);
    auto pretrain = build_pretrain(ecfg, dcfg, rng);
    auto downstream = build_downstream(ecfg, hcfg, rng);

    auto cp = parameter_census(pretrain);
    auto cd = parameter_census(downstream);
    CHECK(cd.count("decoder") == 0);
    CHECK(cd.count("ctc_head") == 0);
    CHECK(cd.total < cp.total);
    int64_t sum = 0;
    for (const auto& [prefix, n] : cd.by_prefix) sum += n;
    CHECK(sum == cd.total);
}
