#include <cmath>
#include <vector>

#include "doctest.h"
#include "layerforge/diffusion.hpp"
#include "layerforge/numerics.hpp"
#include "layerforge/prompts.hpp"
#include "layerforge/scenegen.hpp"

using namespace layerforge;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.image_h = c.image_w = 16;
    c.latent_h = c.latent_w = 4;
    c.dim = 8;
    c.seq_len = 8;
    c.blocks = 1;
    c.heads = 2;
    c.alpha_hidden = 4;
    return c;
}

NoisePredictor zero_predictor() {
    return [](const std::vector<Tensor>& z, int) {
        std::vector<Tensor> out;
        for (const auto& l : z) out.emplace_back(l.shape(), 0.0f);
        return out;
    };
}

}  // namespace

TEST_SUITE("diffusion") {
    TEST_CASE("q_sample examples") {
        const NoiseSchedule s = NoiseSchedule::linear();
        const Tensor z0({2, 3}, 1.0f), eps({2, 3}, 1.0f);
        CHECK(q_sample(z0, 0, eps, s).bit_equal(z0));

        NoiseSchedule quarter = s;
        quarter.alpha_bar[10] = 0.25;
        const Tensor q = q_sample(z0, 10, eps, quarter);
        CHECK(q[0] == doctest::Approx(0.5 + std::sqrt(0.75)));

        quarter.alpha_bar[10] = 0.0;
        CHECK(q_sample(z0, 10, Tensor({2, 3}, 0.3f), quarter)[0] == doctest::Approx(0.3));
    }

    TEST_CASE("predict_x0 inverts q_sample at every t") {
        const NoiseSchedule s = NoiseSchedule::linear();
        Rng rng(41);
        const Tensor z0 = rng.normal_tensor<float>({4, 4}), eps = rng.normal_tensor<float>({4, 4});
        for (int t = 0; t <= s.T; t += 37)
            CHECK(max_abs_diff(predict_x0(q_sample(z0, t, eps, s), eps, s.abar(t)), z0) <= 1e-5f * 10);
    }

    TEST_CASE("ddim_step examples") {
        const NoiseSchedule s = NoiseSchedule::linear();
        Rng rng(42);
        const Tensor z0 = rng.normal_tensor<float>({4, 4}), eps = rng.normal_tensor<float>({4, 4});
        const Tensor zt = q_sample(z0, 500, eps, s);
        const NoisePredictor oracle = [&](const std::vector<Tensor>&, int) { return std::vector<Tensor>{eps}; };
        CHECK(max_abs_diff(ddim_step(oracle, {zt}, 500, 0, s)[0], z0) <= 1e-5f);
        CHECK(max_abs_diff(ddim_step(oracle, {zt}, 500, 500, s)[0], zt) == 0.0f);

        // Two half-steps with the true noise land on the closed-form latent.
        const Tensor mid = ddim_step(oracle, {zt}, 500, 250, s)[0];
        const Tensor end = ddim_step(oracle, {mid}, 250, 100, s)[0];
        CHECK(max_abs_diff(end, q_sample(z0, 100, eps, s)) <= 1e-5f);
    }

    TEST_CASE("ddim inversion with a zero predictor is schedule rescaling") {
        const NoiseSchedule s = NoiseSchedule::linear();
        Rng rng(43);
        const Tensor z0 = rng.normal_tensor<float>({4, 4});
        std::vector<int> grid = s.ddim_timesteps(10);
        std::vector<int> asc(grid.rbegin(), grid.rend());
        const auto traj = ddim_invert(zero_predictor(), {z0}, asc, s);
        const Tensor& zT = traj.back()[0];
        for (std::size_t i = 0; i < z0.size(); ++i)
            CHECK(zT[i] == doctest::Approx(z0[i] * std::sqrt(s.abar(s.T))).epsilon(1e-5));
        const auto back = ddim_sample(zero_predictor(), {zT}, grid, s);
        CHECK(max_abs_diff(back[0], z0) <= 1e-5f);
    }

    TEST_CASE("ddim sampling is deterministic") {
        const ModelConfig c = tiny_config();
        const DenoiserModel m = init_denoiser(c, 3, Vocabulary::standard().size());
        const auto seqs = std::vector<TokenSeq>{tokenize("blue solid", Vocabulary::standard(), c.seq_len)};
        const NoisePredictor p = make_predictor(m, Conditioning::single(seqs[0]), {});
        const auto grid = c.schedule().ddim_timesteps(5);
        const auto a = ddim_sample(p, initial_latents(c, 1, 9), grid, c.schedule());
        const auto b = ddim_sample(p, initial_latents(c, 1, 9), grid, c.schedule());
        CHECK(a[0].bit_equal(b[0]));
    }

    TEST_CASE("decode_alpha of a zero-init head is 0.5") {
        const ModelConfig c = tiny_config();
        const DenoiserModel m = init_denoiser(c, 4, Vocabulary::standard().size());
        Rng rng(44);
        const Tensor a = decode_alpha(m, rng.normal_tensor<float>({c.tokens(), c.dim}));
        CHECK(a.dim(0) == c.image_h);
        CHECK(a.dim(1) == c.image_w);
        for (float v : a.data()) CHECK(v == doctest::Approx(0.5));
    }

    TEST_CASE("balanced alpha weights split the loss between covered and clear cells") {
        Tensor a({2, 4});
        a.at(0, 0) = 1;
        const Tensor w = balanced_alpha_weights(a);
        CHECK(w.at(0, 0) == doctest::Approx(4.0));
        CHECK(w.at(1, 3) == doctest::Approx(8.0 / 14));
        const Tensor clear = balanced_alpha_weights(Tensor({2, 4}, 0.0f));
        for (float v : clear.data()) CHECK(v == 1.0f);
    }

    TEST_CASE("decode_alpha trained on synthetic scenes") {
        ModelConfig c = tiny_config();
        c.image_h = c.image_w = 32;
        c.latent_h = c.latent_w = 8;
        DenoiserModel m = init_denoiser(c, 8, Vocabulary::standard().size());
        std::vector<TrainingExample> train_set, held_out;
        for (std::uint64_t s = 0; s < 12; ++s) {
            const auto ex = make_training_example(m, render_scene(random_scene(300 + s, 2, 32, 32)).stack);
            (s < 8 ? train_set : held_out).push_back(ex);
        }
        TrainOptions o;
        o.learning_rate = 0;  // alpha head only
        train(m, train_set, c.schedule(), o, 1, 0, 200);
        double err = 0;
        std::size_t n = 0;
        for (std::uint64_t s = 300 + 8; s < 300 + 12; ++s) {
            const LayerStack st = render_scene(random_scene(s, 2, 32, 32)).stack;
            const TrainingExample ex = make_training_example(m, st);
            for (std::size_t f = 0; f < st.foregrounds.size(); ++f) {
                const Tensor a = decode_alpha(m, ex.latents[f + 1]);
                for (std::size_t i = 0; i < a.size(); ++i, ++n) err += std::abs(a[i] - st.foregrounds[f].alpha()[i]);
            }
        }
        CHECK(err / n < 0.1);
    }

    TEST_CASE("train_step examples") {
        const ModelConfig c = tiny_config();
        const DenoiserModel init = init_denoiser(c, 5, Vocabulary::standard().size());
        LayerStack stack;
        Tensor bg({16, 16, 3}, 0.3f), fg({16, 16, 3}, 0.8f), a({16, 16});
        for (std::size_t y = 4; y < 10; ++y)
            for (std::size_t x = 4; x < 10; ++x) a.at(y, x) = 1;
        stack.background = Layer::opaque(bg);
        stack.foregrounds.emplace_back(fg, a);
        stack.prompts = {"blue solid", "red square"};
        const TrainingExample ex = make_training_example(init, stack);
        const NoiseSchedule s = c.schedule();

        DenoiserModel frozen = init;
        TrainOptions zero;
        zero.learning_rate = 0;
        zero.alpha_learning_rate = 0;
        train_step(frozen, ex, s, zero, 7, 0);
        for (std::size_t i = 0; i < init.params.size(); ++i) CHECK(frozen.params[i].bit_equal(init.params[i]));

        DenoiserModel plain = init;
        TrainOptions only_noise;
        only_noise.lambdas.context = only_noise.lambdas.layout = 0;
        const StepLog log = train_step(plain, ex, s, only_noise, 7, 0);
        CHECK(log.total == doctest::Approx(log.noise));
    }

    TEST_CASE("checkpoint round trip") {
        const ModelConfig c = tiny_config();
        const auto dir = std::filesystem::temp_directory_path() / "layerforge_unit_ckpt";
        std::filesystem::remove_all(dir);
        save_checkpoint(dir, {init_denoiser(c, 6, Vocabulary::standard().size()), 12, 6});
        const Checkpoint back = load_checkpoint(dir);
        const DenoiserModel ref = init_denoiser(c, 6, Vocabulary::standard().size());
        CHECK(back.step == 12);
        for (std::size_t i = 0; i < ref.params.size(); ++i) CHECK(back.model.params[i].bit_equal(ref.params[i]));
        std::filesystem::remove_all(dir);
    }
}
