// Writes a small two-recording dataset for the command-line workflow test.
#include <cstdio>
#include <filesystem>

#include "fixtures.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: make_fixture <dir>\n");
    return 2;
  }
  const std::filesystem::path dir(argv[1]);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "ann");
  std::vector<nerdd::RecordingManifest> ms;
  for (const char* id : {"clip_a", "clip_b"}) {
    auto rec = fixture::write_recording(dir, id, 12, 64, 48, id[5] == 'a' ? 2 : 3);
    nerdd::save_annotations((dir / "ann" / (std::string(id) + ".json")).string(), rec.annotations);
    ms.push_back(rec.manifest);
  }
  nerdd::save_manifest((dir / "manifest.json").string(), ms);
  return 0;
}
