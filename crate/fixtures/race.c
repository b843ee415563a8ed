int x = 0;

void inc(void) {
  int v = x;
  v = v + 1;
  x = v;
}

int main(void) {
  spawn(inc);
  inc();
  while (x < 2)
    if (!retry()) abort();
  return 0;
}
