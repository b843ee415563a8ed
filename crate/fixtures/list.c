struct node { int v; struct node *next; };

struct node *push(struct node *head, int v) {
  struct node *n = malloc(sizeof *n);
  n->v = v;
  n->next = head;
  return n;
}

int main(void) {
  struct node *head = 0;
  for (int i = 0; i < 4; i++)
    head = push(head, i);
  yield();
  int sum = 0;
  for (struct node *p = head; p; p = p->next)
    sum += p->v;
  return sum;
}
