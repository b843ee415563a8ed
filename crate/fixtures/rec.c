int depth = 3;

int down(int n) {
  if (n > 1) return down(n - 1);
  return yield(), 0;
}

int main(void) {
  if (depth > 1)
    return down(depth - 1);
  yield();
  return 0;
}
