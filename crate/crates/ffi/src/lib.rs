// C ABI surface; populated once the core library lands.
