#include "app.hpp"

int main(int argc, char** argv) { return polyreply::app::run(argc, argv); }
