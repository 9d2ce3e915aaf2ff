#include "certificate.h"

typedef int BOOL;
#define TRUE 1
#define FALSE 0

/* Ownership of cert passes to settings only when the setter succeeds. */
BOOL freerdp_settings_set_certificate(rdpSettings *settings, size_t id, const rdpCertificate *src)
{
	rdpCertificate *cert = freerdp_certificate_clone(src);
	if (!cert)
		goto out_fail;
	if (!freerdp_settings_set_pointer_len(settings, id, cert, 1))
		goto out_fail;
	return TRUE;

out_fail:
	return FALSE;
}

BOOL freerdp_settings_copy_certificate(rdpSettings *settings, size_t id, const rdpCertificate *src)
{
	rdpCertificate *cert = freerdp_certificate_clone(src);
	if (!cert)
		return FALSE;
	if (!freerdp_settings_set_pointer_len(settings, id, cert, 1)) {
		freerdp_certificate_free(cert);
		return FALSE;
	}
	return TRUE;
}
