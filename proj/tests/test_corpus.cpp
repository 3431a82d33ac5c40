#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstring>
#include <fstream>
#include <sstream>

#include "ooc/corpus.hpp"
#include "ooc/image.hpp"
#include "test_util.hpp"

using namespace ooc;
using namespace ooc::corpus;

namespace {

Record full_record(const std::string& id) {
    Record r;
    r.record_id = id;
    r.original_image = "images/" + id + ".jpg";
    r.caption1_raw = "Obama visited Paris";
    r.caption2_raw = "Macron met \"students\" in Lyon";
    r.caption1_clean = "Person visited Location";
    r.caption2_clean = "Person met \"students\" in Location";
    r.gold_label = 1;
    r.gen1 = GeneratedImageRef{"gen/" + id + "_c1_sd.png", "sd", 42, 512, 512, "2024-01-02T03:04:05Z"};
    r.gen2 = GeneratedImageRef{"gen/" + id + "_c2_sd.png", "sd", std::nullopt, 512, 512, "2024-01-02T03:04:06Z"};
    r.status = Stage::embedded;
    return r;
}

}  // namespace

TEST(Record, JsonRoundTripIsLossless) {
    auto r = full_record("r1");
    r.extra = {{"source", "cosmos"}, {"split", "test"}};
    const auto back = record_from_json(json::parse(to_line(r)));
    EXPECT_EQ(back, r);
}

TEST(Record, MinimalRecordRoundTrips) {
    Record r;
    r.record_id = "7";
    r.original_image = "a.jpg";
    r.caption1_raw = "a";
    r.caption2_raw = "b";
    EXPECT_EQ(record_from_json(json::parse(to_line(r))), r);
}

TEST(Record, StatusIsMonotoneAndRejectedIsTerminal) {
    Record r = full_record("x");
    r.status = Stage::generated;
    EXPECT_THROW(advance(r, Stage::sanitized), DataError);
    advance(r, Stage::embedded);
    EXPECT_EQ(r.status, Stage::embedded);
    advance(r, Stage::rejected, "policy: nope");
    EXPECT_TRUE(r.rejected());
    EXPECT_EQ(r.reject_reason, "policy: nope");
    EXPECT_THROW(advance(r, Stage::predicted), DataError);
}

TEST(Record, GeneratedStatusRequiresBothImages) {
    Record r = full_record("x");
    r.gen2.reset();
    r.status = Stage::generated;
    EXPECT_THROW(validate(r), DataError);
    r.status = Stage::sanitized;  // one image of two is a resumable partial state
    EXPECT_NO_THROW(validate(r));
}

TEST(Record, GeneratedImageNeedsCleanCaption) {
    Record r = full_record("x");
    r.caption2_clean.reset();
    EXPECT_THROW(validate(r), DataError);
}

TEST(Manifest, EmptyFileGivesNoRecords) {
    test::TempDir dir;
    std::ofstream(dir / "m.jsonl").close();
    EXPECT_TRUE(load_manifest(dir / "m.jsonl").empty());
}

TEST(Manifest, LargeManifestKeepsEveryCaption) {
    test::TempDir dir;
    std::vector<Record> recs;
    for (int i = 0; i < 1700; ++i) {
        Record r;
        r.record_id = std::to_string(i);
        r.original_image = std::to_string(i) + ".jpg";
        r.caption1_raw = "first caption " + std::to_string(i);
        r.caption2_raw = "second caption " + std::to_string(i);
        r.gold_label = i % 2;
        recs.push_back(r);
    }
    save_manifest(dir / "m.jsonl", recs);
    const auto back = load_manifest(dir / "m.jsonl");
    ASSERT_EQ(back.size(), 1700u);
    std::size_t captions = 0;
    for (const auto& r : back) captions += !r.caption1_raw.empty() + !r.caption2_raw.empty();
    EXPECT_EQ(captions, 3400u);
    EXPECT_EQ(back, recs);
}

TEST(Manifest, DuplicateIdsAreRejectedWithLineNumber) {
    test::TempDir dir;
    std::ofstream(dir / "m.jsonl") << to_line(full_record("a")) << "\n" << to_line(full_record("b")) << "\n"
                                   << to_line(full_record("a")) << "\n";
    try {
        load_manifest(dir / "m.jsonl");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line, 3u);
    }
}

TEST(Manifest, MalformedLineIsAParseError) {
    test::TempDir dir;
    std::ofstream(dir / "m.jsonl") << to_line(full_record("a")) << "\n{not json\n";
    try {
        load_manifest(dir / "m.jsonl");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line, 2u);
    }
}

TEST(ManifestStore, AppendThenReload) {
    test::TempDir dir;
    const auto r = full_record("a");
    {
        ManifestStore store(dir / "m.jsonl");
        store.append(r);
        store.checkpoint();
    }
    ManifestStore store(dir / "m.jsonl");
    ASSERT_EQ(store.size(), 1u);
    EXPECT_EQ(*store.find("a"), r);
}

TEST(ManifestStore, AppendingADuplicateIdThrows) {
    test::TempDir dir;
    ManifestStore store(dir / "m.jsonl");
    store.append(full_record("a"));
    EXPECT_THROW(store.append(full_record("a")), DataError);
    EXPECT_THROW(store.update(full_record("zzz")), DataError);
}

// The child acknowledges writes and dies without running any destructor.
TEST(ManifestStore, AcknowledgedWritesSurviveACrash) {
    test::TempDir dir;
    const auto path = dir / "m.jsonl";
    auto base = full_record("a");
    base.status = Stage::sanitized;
    base.gen1.reset();
    base.gen2.reset();
    save_manifest(path, std::vector<Record>{base});

    const pid_t pid = fork();
    ASSERT_GE(pid, 0);
    if (pid == 0) {
        auto* store = new ManifestStore(path);
        auto r = *store->find("a");
        r.status = Stage::generated;
        r.gen1 = full_record("a").gen1;
        r.gen2 = full_record("a").gen2;
        store->update(r);
        store->append(full_record("b"));
        _exit(0);
    }
    int status = 0;
    waitpid(pid, &status, 0);
    ASSERT_TRUE(WIFEXITED(status));

    ManifestStore store(path);
    ASSERT_EQ(store.size(), 2u);
    EXPECT_EQ(store.find("a")->status, Stage::generated);
    EXPECT_EQ(*store.find("b"), full_record("b"));
    store.checkpoint();
    EXPECT_EQ(std::filesystem::file_size(store.journal_path()), 0u);
    EXPECT_EQ(load_manifest(path).size(), 2u);
}

TEST(ManifestStore, TornJournalTailIsDropped) {
    test::TempDir dir;
    const auto path = dir / "m.jsonl";
    {
        ManifestStore store(path);
        store.append(full_record("a"));
    }
    {
        std::ofstream j(path.string() + ".journal", std::ios::app);
        j << R"({"record_id":"b","original_ima)";  // no newline: write cut short
    }
    ManifestStore store(path);
    EXPECT_EQ(store.size(), 1u);
    EXPECT_TRUE(store.find("a"));
    store.append(full_record("c"));
    store.checkpoint();
    const auto back = load_manifest(path);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].record_id, "c");
}

TEST(ManifestStore, SecondWriterIsLockedOut) {
    test::TempDir dir;
    ManifestStore first(dir / "m.jsonl");
    EXPECT_THROW(ManifestStore second(dir / "m.jsonl"), StorageError);
}

TEST(ManifestStore, LockIsReleasedOnDestruction) {
    test::TempDir dir;
    { ManifestStore first(dir / "m.jsonl"); }
    EXPECT_NO_THROW(ManifestStore second(dir / "m.jsonl"));
}

TEST(EmbeddingCache, PutThenGet) {
    test::TempDir dir;
    EmbeddingCache cache(dir / "c.emb", 3);
    const std::vector<float> v = {0.25f, -1.5f, 3.0f};
    cache.put("k", v);
    EXPECT_EQ(cache.get("k"), v);
    EXPECT_FALSE(cache.get("unknown"));
}

TEST(EmbeddingCache, ReloadIsBitExact) {
    test::TempDir dir;
    const std::vector<float> v = {1.0f / 3.0f, -0.0f, 1e-30f, 123456.789f};
    {
        EmbeddingCache cache(dir / "c.emb", 4);
        cache.put("alpha", v);
        cache.put("beta", std::vector<float>(4, 2.0f));
    }
    EmbeddingCache cache(dir / "c.emb", 4);
    EXPECT_EQ(cache.size(), 2u);
    const auto back = *cache.get("alpha");
    EXPECT_EQ(std::memcmp(back.data(), v.data(), v.size() * sizeof(float)), 0);
}

TEST(EmbeddingCache, FileLayout) {
    test::TempDir dir;
    {
        EmbeddingCache cache(dir / "c.emb", 2);
        cache.put("ab", std::vector<float>{1.0f, -2.0f});
    }
    const auto bytes = read_file_bytes(dir / "c.emb");
    // magic(4) count(4) dim(4) keylen(2) key(2) floats(8)
    ASSERT_EQ(bytes.size(), 24u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "EMB1");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
    EXPECT_EQ(bytes[8], 2);
    EXPECT_EQ(bytes[12], 2);
    EXPECT_EQ(bytes[13], 0);
    EXPECT_EQ(bytes[14], 'a');
    EXPECT_EQ(bytes[15], 'b');
    // 1.0f = 0x3f800000, little-endian
    EXPECT_EQ(bytes[16], 0x00);
    EXPECT_EQ(bytes[19], 0x3f);
    EXPECT_EQ(bytes[23], 0xc0);  // -2.0f = 0xc0000000
}

TEST(EmbeddingCache, UncountedTailFromAnInterruptedPutIsDropped) {
    test::TempDir dir;
    {
        EmbeddingCache cache(dir / "c.emb", 2);
        cache.put("a", std::vector<float>{1, 2});
    }
    const auto intact = std::filesystem::file_size(dir / "c.emb");
    {
        // Entry bytes written, header count not yet patched.
        std::ofstream out(dir / "c.emb", std::ios::binary | std::ios::app);
        out.write("\x01\x00" "b" "\x00\x00", 5);
    }
    EmbeddingCache cache(dir / "c.emb", 2);
    EXPECT_EQ(cache.size(), 1u);
    EXPECT_EQ(std::filesystem::file_size(dir / "c.emb"), intact);
    cache.put("b", std::vector<float>{5, 6});
    EXPECT_EQ(cache.get("b"), (std::vector<float>{5, 6}));
}

TEST(EmbeddingCache, TruncatedCountedEntryIsCorruption) {
    test::TempDir dir;
    {
        EmbeddingCache cache(dir / "c.emb", 2);
        cache.put("a", std::vector<float>{1, 2});
        cache.put("b", std::vector<float>{3, 4});
    }
    std::filesystem::resize_file(dir / "c.emb", std::filesystem::file_size(dir / "c.emb") - 3);
    EXPECT_THROW(EmbeddingCache(dir / "c.emb", 2), DataError);
}

TEST(EmbeddingCache, DimMismatchIsAnError) {
    test::TempDir dir;
    { EmbeddingCache cache(dir / "c.emb", 2); }
    EXPECT_THROW(EmbeddingCache(dir / "c.emb", 3), DataError);
    EmbeddingCache cache(dir / "c.emb", 2);
    EXPECT_THROW(cache.put("k", std::vector<float>{1, 2, 3}), DataError);
}

TEST(EmbeddingKey, ContentAddressedAndConfigSpecific) {
    const std::vector<std::uint8_t> img = {1, 2, 3, 4};
    const std::vector<std::uint8_t> same = {1, 2, 3, 4};
    const std::vector<std::uint8_t> other = {1, 2, 3, 5};
    EXPECT_EQ(embedding_key(img, "cfgA"), embedding_key(same, "cfgA"));
    EXPECT_NE(embedding_key(img, "cfgA"), embedding_key(img, "cfgB"));
    EXPECT_NE(embedding_key(img, "cfgA"), embedding_key(other, "cfgA"));
}

TEST(Survey, ParsesRatings) {
    std::istringstream in("pair_id,participant_id,rating\n1699,p1,7\n1699,p2,3\n\n1698,p1,10\n");
    const auto r = read_survey_csv(in);
    ASSERT_EQ(r.size(), 3u);
    EXPECT_EQ(r[0].pair_id, "1699");
    EXPECT_EQ(r[1].rating, 3);
    EXPECT_EQ(r[2].rating, 10);
}

TEST(Survey, OutOfRangeRatingNamesTheLine) {
    std::istringstream in("pair_id,participant_id,rating\n1699,p1,7\n1699,p2,11\n");
    try {
        read_survey_csv(in);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line, 3u);
    }
    std::istringstream zero("pair_id,participant_id,rating\n1,p,0\n");
    EXPECT_THROW(read_survey_csv(zero), ParseError);
    std::istringstream frac("pair_id,participant_id,rating\n1,p,5.5\n");
    EXPECT_THROW(read_survey_csv(frac), ParseError);
    std::istringstream header("pair,participant,score\n");
    EXPECT_THROW(read_survey_csv(header), ParseError);
}
