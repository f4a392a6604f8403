// Train a small student on toy data, export it to a packed bundle and
// compare packed logits with the float-simulated forward.

#include <binspot/binspot.hpp>

#include <cstdio>
#include <numeric>

int main() {
    using namespace binspot;

    ModelConfig cfg;
    cfg.backbone_dim = 32;
    cfg.hidden_dim = 64;
    cfg.head_channels = 4;

    const FeatureDataset train_set = gen_toy_dataset(7, 4, 40);
    const FeatureDataset test_set = gen_toy_dataset(8, 4, 20);

    TrainConfig tc;
    tc.epochs = 3;
    DtaModel teacher = pretrain_teacher(cfg, train_set, tc);
    DtaModel student(cfg, tc.seed);
    train(student, &teacher, train_set, tc);

    const PackedModel packed(student);
    save_bundle("student.bfsp", packed);
    const PackedModel loaded = load_bundle("student.bfsp");

    std::vector<std::size_t> idx(8);
    std::iota(idx.begin(), idx.end(), 0);
    const Tensor x = test_set.batch(idx);
    for (std::size_t delta : cfg.delta_set) {
        const Tensor a = student.logits(x, delta);
        const Tensor b = loaded.logits(x, delta);
        Real worst = 0;
        for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
        std::printf("delta=%zu accuracy=%.3f max|float-packed|=%.3g\n", delta, evaluate(student, test_set, delta),
                    worst);
    }
    return 0;
}
