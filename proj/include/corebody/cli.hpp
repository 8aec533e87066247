#pragma once

namespace corebody {

// Entry point of the `corebody` command. Returns the process exit status:
// 0 on success, 1 on runtime failure, 2 on usage errors.
int run_cli(int argc, char** argv);

}  // namespace corebody
