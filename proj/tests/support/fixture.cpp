#include "fixture.hpp"

#include <atomic>
#include <unistd.h>

namespace kbc::testing {

namespace {

struct Row {
    const char* id;
    const char* caption;
    const char* text;
    std::vector<std::uint8_t> labels;  // person, dog, cat, bicycle, car, bird
};

const std::vector<Row>& rows() {
    static const std::vector<Row> r{
        {"s01", "two dogs playing with a red ball on green grass", "Two brown dogs chase a red ball across the grass.",
         {0, 1, 0, 0, 0, 0}},
        {"s02", "a man riding a blue bicycle down a busy street", "A man rides his blue bicycle along a busy street.",
         {1, 0, 0, 1, 0, 0}},
        {"s03", "a black cat sleeping on a wooden chair", "A black cat naps on an old wooden chair.",
         {0, 0, 1, 0, 0, 0}},
        {"s04", "three small birds sitting on a tall tree branch", "Three small birds perch on a branch of a tall tree.",
         {0, 0, 0, 0, 0, 1}},
        {"s05", "a woman walking a small dog in a green park", "A woman walks her small dog through the park.",
         {1, 1, 0, 0, 0, 0}},
        {"s06", "a red car parked beside a white house", "A red car is parked next to a white house.",
         {0, 0, 0, 0, 1, 0}},
        {"s07", "a child holding a grey cat near a window", "A young child holds a grey cat by the window.",
         {1, 0, 1, 0, 0, 0}},
        {"s08", "two cars and a bicycle at a city intersection", "Two cars wait beside a bicycle at an intersection.",
         {0, 0, 0, 1, 1, 0}},
    };
    return r;
}

}  // namespace

Manifest fixture_manifest() {
    Manifest m;
    m.dataset_id = "fixture-general-8";
    m.domain = Domain::General;
    m.label_names = {"person", "dog", "cat", "bicycle", "car", "bird"};
    for (const auto& r : rows()) {
        Sample s;
        s.id = r.id;
        s.domain = Domain::General;
        const std::uint64_t h = sha256_u64(r.caption);
        const Rgb colour{static_cast<std::uint8_t>(h), static_cast<std::uint8_t>(h >> 8),
                         static_cast<std::uint8_t>(h >> 16)};
        s.image = Payload::image(encode_solid_png(32, 32, colour, r.caption));
        s.text = r.text;
        s.labels = r.labels;
        m.samples.push_back(std::move(s));
        m.image_refs.push_back("images/" + std::string(r.id) + ".png");
    }
    return m;
}

std::filesystem::path write_fixture(const std::filesystem::path& dir) {
    write_manifest(fixture_manifest(), dir);
    return dir / "manifest.json";
}

std::filesystem::path scratch_dir(const std::string& tag) {
    static std::atomic<int> counter{0};
    const auto dir = std::filesystem::temp_directory_path() /
                     ("kbc-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace kbc::testing
