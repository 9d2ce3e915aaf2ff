#include <stdlib.h>
#include <string.h>

#define XMALLOC(n) malloc(n)
#define XFREE(p) free(p)
#define LOG_MSG(msg) log_it(msg)

struct ctx {
	char *name;
	int refs;
};

static struct ctx *g_ctx;

/* decoy: freed on every path */
int process_buffer(size_t n)
{
	char *buf = XMALLOC(n);
	if (!buf)
		return -1;
	if (n > 16)
		memset(buf, 0, n);
	LOG_MSG("processed");
	XFREE(buf);
	return 0;
}

/* decoy: ownership leaves through the return value */
char *dup_name(const char *name)
{
	char *copy = malloc(strlen(name) + 1);
	if (copy == NULL)
		return NULL;
	strcpy(copy, name);
	return copy;
}

/* decoy: allocation and release are guarded by the same condition */
int maybe_cache(struct ctx *ctx, int use_cache)
{
	char *tmp = NULL;
	if (use_cache)
		tmp = malloc(64);
	ctx->refs++;
	if (use_cache)
		free(tmp);
	return 0;
}

/* decoy: stored into a global */
int ctx_install(void)
{
	struct ctx *c = calloc(1, sizeof(*c));
	if (!c)
		return -1;
	g_ctx = c;
	return 0;
}

void ctx_release(struct ctx *c)
{
	if (c == NULL)
		return;
	free(c->name);
	free(c);
}

void *test_make_buffer(void)
{
	return malloc(8);
}

static int run_self_test(void)
{
	char *name = dup_name("x");
	ctx_release(g_ctx);
	free(name);
	return 0;
}

int main(void)
{
	return run_self_test();
}
