#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace adamix;
using adamix::testing::scratch_dir;
using adamix::testing::write_file;

namespace {

std::span<const int> content_of(const LabeledExample& ex) { return std::span<const int>(ex.tokens).subspan(1); }

std::vector<std::size_t> class_counts(const Dataset& d, std::size_t classes) {
    std::vector<std::size_t> counts(classes, 0);
    for (const auto* split : {&d.train, &d.test})
        for (const auto& ex : *split) ++counts[static_cast<std::size_t>(ex.label)];
    return counts;
}

}  // namespace

TEST(Vocab, FrequencyOrderWithLexicalTies) {
    const std::vector<std::string> corpus{"b a c", "a b", "a d"};
    const Vocab v = build_vocab(corpus);
    ASSERT_EQ(v.size(), 7u);
    EXPECT_EQ(v.token(0), "<pad>");
    EXPECT_EQ(v.token(1), "<unk>");
    EXPECT_EQ(v.token(2), "<cls>");
    EXPECT_EQ(v.id("a"), 3);
    EXPECT_EQ(v.id("b"), 4);
    EXPECT_EQ(v.id("c"), 5);
    EXPECT_EQ(v.id("d"), 6);
    EXPECT_EQ(v.id("zebra"), kUnkId);
}

TEST(Vocab, CapAndDeterminism) {
    const std::vector<std::string> corpus{"x y z y z z", "w"};
    const Vocab capped = build_vocab(corpus, 5);
    EXPECT_EQ(capped.size(), 5u);
    EXPECT_EQ(capped.id("w"), kUnkId);
    EXPECT_EQ(build_vocab(corpus).tokens(), build_vocab(corpus).tokens());
}

TEST(Vocab, EmptyCorpusIsDataError) { EXPECT_THROW((void)build_vocab(std::vector<std::string>{}), DataError); }

TEST(Encode, ClsPrefixPadAndTruncate) {
    const std::vector<std::string> corpus{"a b c"};
    const Vocab v = build_vocab(corpus);
    EXPECT_EQ(encode(v, "a b", 5), (std::vector<int>{kClsId, v.id("a"), v.id("b"), kPadId, kPadId}));
    std::string longline;
    for (int i = 0; i < 40; ++i) longline += "a ";
    const auto ids = encode(v, longline, 16);
    EXPECT_EQ(ids.size(), 16u);
    EXPECT_EQ(ids.front(), kClsId);
    EXPECT_EQ(ids.back(), v.id("a"));
}

TEST(Tsv, LoadsRows) {
    const auto dir = scratch_dir("tsv_load");
    write_file(dir / "d.tsv", "good movie\t1\nbad film\t0\r\n\nfine\t2\n");
    const auto texts = read_tsv_texts((dir / "d.tsv").string());
    const Vocab v = build_vocab(texts);
    const auto ex = load_tsv((dir / "d.tsv").string(), v, 16, 3);
    ASSERT_EQ(ex.size(), 3u);
    EXPECT_EQ(ex[0].label, 1);
    EXPECT_EQ(ex[1].label, 0);
    EXPECT_EQ(ex[2].label, 2);
    EXPECT_EQ(ex[0].tokens.size(), 16u);
    EXPECT_EQ(ex[0].tokens[1], v.id("good"));
}

TEST(Tsv, MissingTabNamesLine) {
    const auto dir = scratch_dir("tsv_tab");
    write_file(dir / "d.tsv", "ok\t0\nno tab here\n");
    const Vocab v = build_vocab(std::vector<std::string>{"ok"});
    try {
        (void)load_tsv((dir / "d.tsv").string(), v, 16, 2);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
    }
}

TEST(Tsv, UnknownLabelNamesLine) {
    const auto dir = scratch_dir("tsv_label");
    write_file(dir / "d.tsv", "a\t0\nb\t7\n");
    const Vocab v = build_vocab(std::vector<std::string>{"a b"});
    for (const char* bad : {"b\t7\n", "b\tpositive\n", "b\t-1\n"}) {
        write_file(dir / "d.tsv", std::string("a\t0\n") + bad);
        try {
            (void)load_tsv((dir / "d.tsv").string(), v, 16, 2);
            FAIL() << bad;
        } catch (const DataError& e) {
            const std::string msg = e.what();
            EXPECT_NE(msg.find(":2:"), std::string::npos) << msg;
            EXPECT_NE(msg.find("unknown label"), std::string::npos) << msg;
        }
    }
}

TEST(Tsv, MissingFile) {
    const Vocab v;
    EXPECT_THROW((void)load_tsv("/nonexistent/x.tsv", v, 16, 2), DataError);
}

TEST(Tsv, ExportRoundTrip) {
    SyntheticSpec spec;
    spec.examples = 50;
    const Dataset d = synthetic_task(spec);
    std::ostringstream os;
    export_tsv(os, d.train);
    const auto dir = scratch_dir("tsv_export");
    write_file(dir / "e.tsv", os.str());
    // A vocabulary that maps "t<id>" back to <id>.
    Vocab v;
    for (int id = kFirstTokenId; id < 64; ++id) v.add("t" + std::to_string(id));
    const auto back = load_tsv((dir / "e.tsv").string(), v, 16, 4);
    EXPECT_EQ(back, d.train);
}

TEST(Synthetic, SameSeedSameDataset) {
    SyntheticSpec spec;
    const Dataset a = synthetic_task(spec);
    const Dataset b = synthetic_task(spec);
    EXPECT_EQ(dataset_checksum(a.train), dataset_checksum(b.train));
    EXPECT_EQ(dataset_checksum(a.test), dataset_checksum(b.test));
    spec.seed = 14;
    EXPECT_NE(dataset_checksum(synthetic_task(spec).train), dataset_checksum(a.train));
}

TEST(Synthetic, SplitSizesAndShape) {
    SyntheticSpec spec;
    const Dataset d = synthetic_task(spec);
    EXPECT_EQ(d.train.size(), 3200u);
    EXPECT_EQ(d.test.size(), 800u);
    for (const auto& ex : d.train) {
        ASSERT_EQ(ex.tokens.size(), 16u);
        EXPECT_EQ(ex.tokens.front(), kClsId);
        for (int id : content_of(ex)) {
            EXPECT_GE(id, kFirstTokenId);
            EXPECT_LT(id, 64);
        }
    }
}

TEST(Synthetic, LabelsMatchIndependentRecount) {
    for (TaskKind kind : {TaskKind::majority, TaskKind::parity, TaskKind::keyphrase}) {
        SyntheticSpec spec;
        spec.kind = kind;
        spec.examples = 2000;
        const Dataset d = synthetic_task(spec);
        for (const auto* split : {&d.train, &d.test}) {
            for (const auto& ex : *split) {
                const auto c = content_of(ex);
                int expected = -1;
                switch (kind) {
                    case TaskKind::majority: {
                        std::vector<int> counts(4, 0);
                        for (int id : c) ++counts[id % 4];
                        const int best = *std::max_element(counts.begin(), counts.end());
                        ASSERT_EQ(std::count(counts.begin(), counts.end(), best), 1);
                        expected = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
                        break;
                    }
                    case TaskKind::parity:
                        expected = static_cast<int>(std::count(c.begin(), c.end(), kFirstTokenId) % 4);
                        break;
                    case TaskKind::keyphrase: {
                        // Two bits: bigram (3,4) and bigram (5,6); the four ids never occur elsewhere.
                        expected = 0;
                        for (std::size_t i = 0; i + 1 < c.size(); ++i) {
                            if (c[i] == 3 && c[i + 1] == 4) expected |= 1;
                            if (c[i] == 5 && c[i + 1] == 6) expected |= 2;
                        }
                        const auto reserved = std::count_if(c.begin(), c.end(), [](int id) { return id >= 3 && id <= 6; });
                        EXPECT_EQ(static_cast<int>(reserved), 2 * std::popcount(static_cast<unsigned>(expected)));
                        break;
                    }
                }
                ASSERT_EQ(ex.label, expected) << to_string(kind);
            }
        }
    }
}

TEST(Synthetic, LibraryLabelFunctionsAgree) {
    SyntheticSpec spec;
    const Dataset d = synthetic_task(spec);
    for (const auto& ex : d.test) EXPECT_EQ(keyphrase_label(content_of(ex), 4), ex.label);
    spec.kind = TaskKind::majority;
    const Dataset m = synthetic_task(spec);
    for (const auto& ex : m.test) EXPECT_EQ(majority_label(content_of(ex), 4), ex.label);
}

TEST(Synthetic, ClassesBalancedWithinTenPercent) {
    for (TaskKind kind : {TaskKind::majority, TaskKind::parity, TaskKind::keyphrase}) {
        for (std::size_t n : {2000u, 4000u}) {
            SyntheticSpec spec;
            spec.kind = kind;
            spec.examples = n;
            const auto counts = class_counts(synthetic_task(spec), 4);
            const double expected = static_cast<double>(n) / 4.0;
            for (std::size_t c : counts) EXPECT_NEAR(static_cast<double>(c), expected, 0.1 * expected) << to_string(kind);
        }
    }
}

TEST(Synthetic, RejectsImpossibleSpecs) {
    SyntheticSpec spec;
    spec.examples = 0;
    EXPECT_THROW((void)synthetic_task(spec), ConfigError);
    spec = {};
    spec.vocab_size = 6;
    EXPECT_THROW((void)synthetic_task(spec), ConfigError);
    spec = {};
    spec.num_classes = 1;
    EXPECT_THROW((void)synthetic_task(spec), ConfigError);
    EXPECT_THROW((void)parse_task_kind("sentiment"), ConfigError);
}

TEST(Batching, PartialFinalBatch) {
    Rng rng(1);
    const auto idx = batch_indices(10, 4, rng);
    ASSERT_EQ(idx.size(), 3u);
    EXPECT_EQ(idx[0].size(), 4u);
    EXPECT_EQ(idx[1].size(), 4u);
    EXPECT_EQ(idx[2].size(), 2u);
}

TEST(Batching, SeededOrderCoversEveryExampleOnce) {
    Rng a(5), b(5), c(6);
    const auto ia = batch_indices(103, 8, a);
    EXPECT_EQ(ia, batch_indices(103, 8, b));
    EXPECT_NE(ia, batch_indices(103, 8, c));
    std::multiset<std::size_t> seen;
    for (const auto& batch : ia) seen.insert(batch.begin(), batch.end());
    ASSERT_EQ(seen.size(), 103u);
    for (std::size_t i = 0; i < 103; ++i) EXPECT_EQ(seen.count(i), 1u);
}

TEST(Batching, EpochsReshuffle) {
    Rng rng(5);
    const auto first = batch_indices(50, 8, rng);
    EXPECT_NE(first, batch_indices(50, 8, rng));
}

TEST(Batching, MakeBatchLayout) {
    SyntheticSpec spec;
    spec.examples = 20;
    const Dataset d = synthetic_task(spec);
    const std::vector<std::size_t> idx{3, 0};
    const Batch b = make_batch(d.train, idx);
    EXPECT_EQ(b.tokens.batch, 2u);
    EXPECT_EQ(b.tokens.seq, 16u);
    EXPECT_EQ(b.labels, (std::vector<int>{d.train[3].label, d.train[0].label}));
    EXPECT_TRUE(std::equal(d.train[0].tokens.begin(), d.train[0].tokens.end(), b.tokens.ids.begin() + 16));
    const auto seq = sequential_batches(d.train, 6);
    ASSERT_EQ(seq.size(), 3u);
    EXPECT_EQ(seq.back().tokens.batch, 4u);
    EXPECT_EQ(seq.front().labels.front(), d.train.front().label);
}

TEST(Batching, RaggedBatchIsDataError) {
    const std::vector<LabeledExample> ex{{{2, 3, 4}, 0}, {{2, 3}, 1}};
    const std::vector<std::size_t> idx{0, 1};
    EXPECT_THROW((void)make_batch(ex, idx), DataError);
    Rng rng(1);
    EXPECT_THROW((void)batch_indices(5, 0, rng), ConfigError);
}
