# Tests package for nctta
