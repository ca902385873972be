#include <stdio.h>
#include "miat.h"
int main(void) {
  uint64_t n = 0;
  if (miat_param_count(MIAT_LAYER_KIND_LTMI, 3, 512, 1, &n) != MIAT_STATUS_OK) return 1;
  printf("ltmi=%llu\n", (unsigned long long)n);
  MiatLtmi *h = NULL;
  if (miat_ltmi_new(2, 6, 4, 1, 0, &h) != MIAT_STATUS_USAGE) return 2;
  printf("err=%s\n", miat_last_error());
  return 0;
}
