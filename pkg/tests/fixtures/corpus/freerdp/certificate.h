#include <stddef.h>

typedef struct rdp_certificate rdpCertificate;
typedef struct rdp_settings rdpSettings;

rdpCertificate *freerdp_certificate_new(void);
rdpCertificate *freerdp_certificate_clone(const rdpCertificate *certificate);
void freerdp_certificate_free(rdpCertificate *cert);
int freerdp_settings_set_pointer_len(rdpSettings *settings, size_t id, const void *data, size_t len);
