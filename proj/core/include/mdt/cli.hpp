#pragma once

namespace mdt {

// Entry point shared by the binary and the in-process CLI tests.
int cli_dispatch(int argc, char** argv);

}  // namespace mdt
