#include "medlsdm/seg_harness.hpp"

#include <algorithm>
#include <cmath>

#include "medlsdm/errors.hpp"

namespace medlsdm {

void SegHarnessConfig::validate() const {
    if (classes < 2)
        throw ConfigError("seg harness: classes must be >= 2");
    if (in_channels < 1 || kernel < 1 || kernel % 2 == 0)
        throw ConfigError("seg harness: kernel must be positive and odd");
    if (batch_size < 1 || epochs < 1 || base_channels < 1)
        throw ConfigError("seg harness: batch_size, epochs, base_channels must be >= 1");
    for (int64_t p : patch)
        if (p < 2)
            throw ConfigError("seg harness: patch dims must be >= 2");
}

std::string to_string(DataTag tag) {
    switch (tag) {
        case DataTag::RealTrain: return "real-train";
        case DataTag::RealTest: return "real-test";
        case DataTag::Synthetic: return "synthetic";
    }
    return "?";
}

SegNet::SegNet(const SegHarnessConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    using A3        = std::array<int64_t, 3>;
    const int64_t k = cfg.kernel;
    const A3 kk{k, k, k};
    const int64_t B = cfg.base_channels;

    const auto add = [&](const std::string& name, int64_t ci, int64_t co, A3 stride = {1, 1, 1}) {
        convs_.emplace(name, nn::Conv3d(name, ci, co, kk, stride));
    };
    add("seg.c0", cfg.in_channels, B);
    add("seg.c1", B, B);
    add("seg.down", B, 2 * B, {2, 2, 2});
    add("seg.c2", 2 * B, 2 * B);
    add("seg.up", 2 * B, B);
    add("seg.c3", 2 * B, B);
    convs_.emplace("seg.out", nn::Conv3d("seg.out", B, cfg.classes, kk, {1, 1, 1}));

    Rng rng(seed ^ Rng::fnv1a64("seg_harness"));
    for (const auto& [name, layer] : convs_)
        layer.init(params_, rng);
}

// instance norm: per-channel statistics over the spatial extent
Var SegNet::norm_act(const Var& x) const {
    return silu(group_norm(x, x->value.dim(3)));
}

Var SegNet::logits(const ParamMap& pm, const Var& x) const {
    const auto& conv = [&](const std::string& n) -> const nn::Conv3d& {
        return convs_.at(n);
    };
    Var h0 = norm_act(conv("seg.c0")(pm, x));
    Var h1 = norm_act(conv("seg.c1")(pm, h0));
    Var h  = norm_act(conv("seg.down")(pm, h1));
    h      = norm_act(conv("seg.c2")(pm, h));
    h      = norm_act(conv("seg.up")(pm, upsample_nearest(h, {2, 2, 2})));
    h      = norm_act(conv("seg.c3")(pm, concat_channels(h1, h)));
    return conv("seg.out")(pm, h);
}

SemanticMap SegNet::predict(const Tensor& x) const {
    ParamMap pm = wrap_params(params_, false);
    Tensor lg   = logits(pm, make_const(x))->value;
    SemanticMap m;
    m.H           = lg.dim(0);
    m.W           = lg.dim(1);
    m.L           = lg.dim(2);
    m.num_classes = cfg_.classes;
    const int64_t C = lg.dim(3);
    m.labels.resize(static_cast<size_t>(m.H * m.W * m.L));
    for (int64_t s = 0; s < m.H * m.W * m.L; ++s) {
        int32_t best = 0;
        double bv    = lg[s * C];
        for (int64_t c = 1; c < C; ++c)
            if (lg[s * C + c] > bv) {
                bv   = lg[s * C + c];
                best = static_cast<int32_t>(c);
            }
        m.labels[static_cast<size_t>(s)] = best;
    }
    return m;
}

// Dice coefficient loss + cross entropy.
Var SegNet::loss(const ParamMap& pm, const Var& x, const Tensor& onehot_gt) const {
    Var lg    = logits(pm, x);
    Var log_p = log_softmax_channels(lg);
    Var gt    = make_const(onehot_gt);

    const double n_vox = static_cast<double>(onehot_gt.numel() / onehot_gt.dim(3));
    Var ce             = scale(sum(mul(log_p, gt)), -1.0 / n_vox);

    Var p        = softmax_channels(lg);
    const int64_t C = onehot_gt.dim(3);
    Tensor eps_t = Tensor::full({C}, 1e-6);
    Var inter    = channel_sums(mul(p, gt));
    Var sizes    = add(channel_sums(p), channel_sums(gt));
    Var score    = div(add(scale(inter, 2.0), make_const(eps_t)), add(sizes, make_const(eps_t)));
    Var dice_loss = sub(make_const(Tensor({1}, 1.0)), mean(score));

    return add(ce, dice_loss);
}

FaithfulnessResult faithfulness_harness(const std::vector<PairedSample>& real_train,
                                        const std::vector<PairedSample>& real_test,
                                        const std::vector<PairedSample>& synth,
                                        const SegHarnessConfig& cfg, uint64_t seed) {
    cfg.validate();
    if (real_train.empty() || real_test.empty() || synth.empty())
        throw DataError("faithfulness_harness: all three sets must be non-empty");
    const int32_t nc = real_train.front().map.num_classes;
    for (const auto* set : {&real_train, &real_test, &synth})
        for (const auto& s : *set)
            if (s.map.num_classes != nc)
                throw DataError("faithfulness_harness: class-count mismatch across sets (" +
                                std::to_string(s.map.num_classes) + " vs " + std::to_string(nc) +
                                ")");
    if (cfg.classes != nc)
        throw DataError("faithfulness_harness: segmentation config expects " +
                        std::to_string(cfg.classes) + " classes, data has " + std::to_string(nc));

    struct TaggedSample {
        const PairedSample* sample;
        DataTag tag;
    };
    std::vector<TaggedSample> train_pool;
    for (const auto& s : real_train)
        train_pool.push_back({&s, DataTag::RealTrain});

    SegNet net(cfg, seed);
    Adam opt(cfg.lr, cfg.beta1, cfg.beta2);
    Rng rng(seed ^ Rng::fnv1a64("seg.batches"));

    FaithfulnessResult result;
    result.training_batch_tags[to_string(DataTag::RealTrain)] = 0;
    result.training_batch_tags[to_string(DataTag::RealTest)]  = 0;
    result.training_batch_tags[to_string(DataTag::Synthetic)] = 0;

    const auto crop_to_patch = [&](const Tensor& data, const SemanticMap& map, Rng& crop_rng) {
        const int64_t H = data.dim(0), W = data.dim(1), L = data.dim(2);
        const auto& p = cfg.patch;
        if (H == p[0] && W == p[1] && L == p[2])
            return std::make_pair(data, one_hot(map));
        if (H < p[0] || W < p[1] || L < p[2])
            throw ShapeError("faithfulness_harness: volume smaller than patch");
        const int64_t oh = crop_rng.uniform_int(0, H - p[0]);
        const int64_t ow = crop_rng.uniform_int(0, W - p[1]);
        const int64_t ol = crop_rng.uniform_int(0, L - p[2]);
        Tensor x({p[0], p[1], p[2], data.dim(3)});
        SemanticMap m;
        m.H = p[0]; m.W = p[1]; m.L = p[2];
        m.num_classes = map.num_classes;
        m.labels.resize(static_cast<size_t>(p[0] * p[1] * p[2]));
        for (int64_t h = 0; h < p[0]; ++h)
            for (int64_t w = 0; w < p[1]; ++w)
                for (int64_t l = 0; l < p[2]; ++l) {
                    for (int64_t c = 0; c < data.dim(3); ++c)
                        x.at(h, w, l, c) = data.at(h + oh, w + ow, l + ol, c);
                    m.at(h, w, l) = map.at(h + oh, w + ow, l + ol);
                }
        return std::make_pair(x, one_hot(m));
    };

    // Training: real-train only; provenance audited per batch.
    const int64_t n = static_cast<int64_t>(train_pool.size());
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int64_t> order(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i)
            order[static_cast<size_t>(i)] = i;
        rng.shuffle(order);
        for (int64_t start = 0; start < n; start += cfg.batch_size) {
            ParamMap pm = wrap_params(net.params(), true);
            Var loss;
            int64_t members = 0;
            for (int64_t bi = start; bi < std::min(start + cfg.batch_size, n); ++bi) {
                const TaggedSample& ts = train_pool[static_cast<size_t>(order[static_cast<size_t>(bi)])];
                if (ts.tag != DataTag::RealTrain)
                    throw DataError("faithfulness_harness: non-training data reached the trainer");
                ++result.training_batch_tags[to_string(ts.tag)];
                auto [x, onehot_gt] = crop_to_patch(ts.sample->volume.data, ts.sample->map, rng);
                Var l = net.loss(pm, make_const(x), onehot_gt);
                loss  = loss ? add(loss, l) : l;
                ++members;
            }
            loss = scale(loss, 1.0 / static_cast<double>(members));
            backward(loss);
            opt.step(net.params(), pm);
        }
    }

    const auto eval_set = [&](const std::vector<PairedSample>& set) {
        double sum = 0.0;
        std::vector<double> per_class;
        for (const auto& s : set) {
            SemanticMap pred = net.predict(s.volume.data);
            DiceResult d     = dice(pred, s.map);
            sum += d.mean;
            if (per_class.empty())
                per_class.assign(d.per_class.size(), 0.0);
            for (size_t c = 0; c < d.per_class.size(); ++c)
                per_class[c] += d.per_class[c];
        }
        DiceResult out;
        out.mean = sum / static_cast<double>(set.size());
        for (double v : per_class)
            out.per_class.push_back(v / static_cast<double>(set.size()));
        return out;
    };
    result.real_train = eval_set(real_train);
    result.real_test  = eval_set(real_test);
    result.synthetic  = eval_set(synth);
    return result;
}

}  // namespace medlsdm
