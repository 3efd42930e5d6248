// Placeholder; replaced by the full CLI once the library is in place.
int main() { return 0; }
