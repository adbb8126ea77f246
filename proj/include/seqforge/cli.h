#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace seqforge::cli {

  // Runs one command line without the program name, e.g.
  // {"bleu", "--hyp", "h.txt", "--ref", "r.txt"}. Returns 0 on success, 1 on a
  // runtime error and 2 on a usage error. SEQFORGE_SEED, when set, replaces
  // --seed.
  int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

  int main(int argc, char** argv);

  // SHA-1 of "blob <size>\0<content>", as git computes for a file.
  std::string git_blob_hash(const std::string& path);

}  // namespace seqforge::cli
