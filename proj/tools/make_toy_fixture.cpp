// Writes the bundled toy corpus: dataset splits, post images, and the
// file fixtures served by the mock retrieval backend.
//
//   make_toy_fixture <out_dir>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mre/data_model.hpp"
#include "mre/image.hpp"
#include "mre/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Theme {
    std::string relation;
    int intensity;  // centre of the grey band used by this relation's images
    std::vector<std::string> cues;
    std::vector<std::string> entities;
    std::vector<std::string> places;
};

const std::vector<Theme> kThemes = {
    {"/per/per/peer", 40, {"with", "alongside", "and"},
     {"teammate", "colleague", "friend", "duo", "partner", "rival", "coach", "squad"}, {"stadium", "court"}},
    {"/per/loc/place_of_residence", 100, {"in", "at", "from"},
     {"city", "skyline", "downtown", "harbor", "district", "street", "suburb", "capital"}, {"home", "town"}},
    {"/org/org/subsidiary", 160, {"owns", "acquires", "controls"},
     {"company", "logo", "brand", "headquarters", "merger", "shares", "board", "firm"}, {"office", "campus"}},
    {"/per/org/member_of", 220, {"joins", "signs", "represents"},
     {"jersey", "club", "contract", "uniform", "league", "roster", "badge", "team"}, {"arena", "press"}},
};

const std::vector<std::string> kPeople = {"Alice", "Bruno", "Chen",  "Dara",  "Emeka", "Farah", "Goran", "Hana",
                                          "Ivan",  "Jaya",  "Kofi",  "Lena",  "Mateo", "Nia",   "Omar",  "Priya"};
const std::vector<std::string> kOrgs = {"Acme", "Borealis", "Cobalt", "Dynamo", "Everest", "Falcon", "Granite", "Helix"};
const std::vector<std::string> kCities = {"Lisbon", "Osaka", "Nairobi", "Quito", "Tallinn", "Perth", "Hanoi", "Oslo"};
const std::vector<std::string> kFiller = {"today", "again", "reportedly", "finally", "last", "week",
                                          "RT", "#news", "photo", "great", "news", "wow"};
const std::vector<std::string> kNoise = {"image", "photography", "stock", "event", "people", "news", "media",
                                         "night", "portrait", "crowd", "sky", "light"};

template <typename V>
const auto& pick(mre::Rng& r, const V& v) { return v[r.below(v.size())]; }

int clamp_px(int v) { return v < 0 ? 0 : (v > 255 ? 255 : v); }

// Grey image whose pixels sit in the theme's band, plus rectangles one band over.
mre::Image themed_image(mre::Rng& r, const Theme& t, std::size_t w, std::size_t h) {
    mre::Image img;
    img.width = w;
    img.height = h;
    img.channels = 1;
    img.pixels.resize(w * h);
    for (auto& p : img.pixels) p = static_cast<unsigned char>(clamp_px(t.intensity + static_cast<int>(r.below(41)) - 20));
    const std::size_t n_rect = 1 + r.below(3);
    for (std::size_t k = 0; k < n_rect; ++k) {
        const std::size_t rx = r.below(w / 2), ry = r.below(h / 2);
        const std::size_t rw = 3 + r.below(w / 2), rh = 3 + r.below(h / 2);
        const int level = clamp_px(t.intensity + (k % 2 ? 30 : -30));
        for (std::size_t y = ry; y < std::min(h, ry + rh); ++y)
            for (std::size_t x = rx; x < std::min(w, rx + rw); ++x) img.pixels[y * w + x] = static_cast<unsigned char>(level);
    }
    return img;
}

void write_bytes(const fs::path& p, const std::string& bytes) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("cannot write " + p.string());
}

void write_json(const fs::path& p, const json& j) { write_bytes(p, j.dump(2) + "\n"); }

mre::RelationInstance make_instance(mre::Rng& r, std::size_t label, const std::string& img_id) {
    const Theme& t = kThemes[label];
    std::string head = pick(r, kPeople), tail;
    switch (label) {
        case 0: do tail = pick(r, kPeople); while (tail == head); break;
        case 1: tail = pick(r, kCities); break;
        case 2: head = pick(r, kOrgs); do tail = pick(r, kOrgs); while (tail == head); break;
        default: tail = pick(r, kOrgs); break;
    }
    std::vector<std::string> toks;
    const std::size_t lead = r.below(3);
    for (std::size_t i = 0; i < lead; ++i) toks.push_back(pick(r, kFiller));
    const std::size_t h_pos = toks.size();
    toks.push_back(head);
    // half of the sentences carry a relation cue, the rest only neutral filler
    toks.push_back(r.below(2) ? pick(r, t.cues) : pick(r, kFiller));
    const std::size_t t_pos = toks.size();
    toks.push_back(tail);
    const std::size_t trail = 1 + r.below(4);
    for (std::size_t i = 0; i < trail; ++i) toks.push_back(pick(r, kFiller));
    mre::RelationInstance inst;
    inst.tokens = toks;
    inst.head = {h_pos, h_pos + 1};
    inst.tail = {t_pos, t_pos + 1};
    inst.image_id = img_id;
    inst.relation = t.relation;
    return inst;
}

std::string escape_html(const std::string& s) {
    std::string o;
    for (char c : s) {
        if (c == '&') o += "&amp;";
        else if (c == '<') o += "&lt;";
        else if (c == '>') o += "&gt;";
        else if (c == '"') o += "&quot;";
        else o += c;
    }
    return o;
}

} // namespace

int main(int argc, char** argv) {
    if (argc != 2) {
        std::cerr << "usage: make_toy_fixture <out_dir>\n";
        return 2;
    }
    const fs::path out = argv[1];
    mre::Rng rng(20240601, "toy-fixture");

    constexpr std::size_t kImage = 24;
    constexpr std::size_t kEntities = 22;
    constexpr std::size_t kMatches = 3;
    constexpr std::size_t kSearch = 22;
    constexpr std::size_t kPool = 30;

    // retrieved-image pool, shared across instances of a relation
    for (std::size_t l = 0; l < kThemes.size(); ++l)
        for (std::size_t i = 0; i < kPool; ++i)
            write_bytes(out / "fixtures" / "images" / ("ret_" + std::to_string(l) + "_" + std::to_string(i) + ".pgm"),
                        mre::encode_image(themed_image(rng, kThemes[l], 16, 16)));

    json objects = json::object(), web = json::object(), search = json::object();
    const std::vector<std::pair<std::string, std::size_t>> splits = {{"train", 32}, {"dev", 16}, {"test", 16}};
    for (const auto& [split, n] : splits) {
        std::vector<mre::RelationInstance> data;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t label = i % kThemes.size();
            const Theme& t = kThemes[label];
            const std::string img_id = split + "_" + std::to_string(i) + ".pgm";
            auto inst = make_instance(rng, label, img_id);
            inst.id = split + "-" + std::to_string(i);
            mre::validate_instance(inst);
            data.push_back(inst);

            write_bytes(out / "images" / img_id, mre::encode_image(themed_image(rng, t, kImage, kImage)));

            // candidate boxes: up to four in bounds, sometimes one out of bounds
            json boxes = json::array();
            const std::size_t n_boxes = 2 + rng.below(3);
            for (std::size_t b = 0; b < n_boxes; ++b) {
                const std::size_t bw = 4 + rng.below(8), bh = 4 + rng.below(8);
                const std::size_t bx = rng.below(kImage - bw), by = rng.below(kImage - bh);
                boxes.push_back({{"bbox", {bx, by, bw, bh}}, {"salience", static_cast<double>(rng.below(100)) / 100.0}});
            }
            if (i % 5 == 0) boxes.push_back({{"bbox", {20, 20, 10, 10}}, {"salience", 0.99}});
            objects[img_id] = boxes;

            // reverse-lookup results for the whole image and each possible crop
            std::string page = "<!DOCTYPE html>\n<html><head><title>" + escape_html(t.relation) +
                               "</title></head><body>\n";
            const std::string page_url = "fixture://pages/" + split + "_" + std::to_string(i) + ".html";
            std::vector<std::string> keys{img_id};
            for (std::size_t o = 1; o <= 3; ++o) keys.push_back(img_id + "#obj" + std::to_string(o));
            for (std::size_t kidx = 0; kidx < keys.size(); ++kidx) {
                json ents = json::array();
                for (std::size_t e = 0; e < kEntities; ++e)
                    ents.push_back(rng.below(3) ? pick(rng, t.entities) : pick(rng, kNoise));
                json matches = json::array();
                for (std::size_t m = 0; m < kMatches; ++m) {
                    const std::string img_url = "https://media.example.org/" + split + "/" + std::to_string(i) + "/" +
                                                std::to_string(kidx) + "-" + std::to_string(m) + ".jpg";
                    matches.push_back({{"page", page_url}, {"image", img_url}});
                    const std::string caption = pick(rng, t.entities) + " " + pick(rng, t.cues) + " " +
                                                pick(rng, t.places) + " " + pick(rng, kNoise);
                    // vary the markup so every caption rule is exercised
                    switch (m) {
                        case 0:
                            page += "<figure><img src=\"" + img_url + "\"><figcaption>" + escape_html(caption) +
                                    "</figcaption></figure>\n";
                            break;
                        case 1:
                            page += "<div><img src=\"" + img_url + "\" alt=\"" + escape_html(caption) + "\"></div>\n";
                            break;
                        default:
                            page += "<p><img src=\"" + img_url + "\" title=\"" + escape_html(caption) + "\"></p>\n";
                            break;
                    }
                }
                web[keys[kidx]] = {{"entities", ents}, {"matches", matches}};
            }
            page += "</body></html>\n";
            write_bytes(out / "fixtures" / "pages" / (split + "_" + std::to_string(i) + ".html"), page);

            std::string sentence;
            for (const auto& tok : inst.tokens) sentence += (sentence.empty() ? "" : " ") + tok;
            json urls = json::array();
            for (std::size_t s = 0; s < kSearch; ++s) {
                // mostly on-theme, occasionally from another relation
                const std::size_t l = rng.below(5) ? label : rng.below(kThemes.size());
                urls.push_back("fixture://images/ret_" + std::to_string(l) + "_" + std::to_string(rng.below(kPool)) +
                               ".pgm");
            }
            search[sentence] = urls;
        }
        mre::write_dataset(out / (split + ".txt"), data);
    }
    write_json(out / "fixtures" / "objects.json", objects);
    write_json(out / "fixtures" / "web.json", web);
    write_json(out / "fixtures" / "search.json", search);
    std::cout << "wrote toy corpus to " << out.string() << "\n";
    return 0;
}
