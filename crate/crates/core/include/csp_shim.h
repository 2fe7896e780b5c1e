/*
 * csp_shim.h - C interface of the csp-core CAN receive replacement.
 *
 * A host library removes its own csp_can2_rx body, keeps the declaration
 * below, and links against libcsp_core.a. The host supplies buffers and
 * receives completed packets through the callback table.
 *
 * Calls into the shim must be serialized by the host. Callbacks must not
 * call back into the shim.
 */
#ifndef CSP_SHIM_H
#define CSP_SHIM_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* csp_can2_rx return codes */
#define CSP_SHIM_OK            0  /* frame accepted (consumed or packet completed) */
#define CSP_SHIM_EINVAL       (-1) /* dlc > 8, NULL data with dlc > 0, or shim not initialized */
#define CSP_SHIM_ENOBUF       (-2) /* no reassembly slot or host buffer available */
#define CSP_SHIM_EDROP        (-3) /* frame dropped by a protocol check */

/* extra shim_init return code */
#define CSP_SHIM_EALREADY     (-4) /* shim_init called twice */

typedef struct {
    /* Passed back verbatim as the first argument of every callback. */
    void *context;
    /* Return a buffer of at least max_data_len writable bytes, or NULL. */
    uint8_t *(*acquire_buffer)(void *context);
    /* Take back a buffer that will not be delivered. */
    void (*release_buffer)(void *context, uint8_t *buffer);
    /* Take ownership of a completed packet: payload of `length` bytes in
     * `buffer`, 32-bit packet header in host byte order. Called exactly
     * once per completed packet. */
    void (*enqueue_packet)(void *context, uint8_t *buffer, uint16_t length, uint32_t header);
    /* Optional millisecond clock for reassembly timeouts; NULL means 0. */
    uint32_t (*now_ms)(void *context);
} csp_shim_host_env_t;

typedef struct {
    uint16_t max_data_len;          /* CSP_BUFFER_SIZE; at most 2042 */
    uint8_t rx_slot_count;          /* concurrent reassembly streams, >= 1 */
    uint32_t reassembly_timeout_ms;
} csp_shim_config_t;

/* Install the callbacks. cfg may be NULL for defaults (256, 2, 1000).
 * Returns CSP_SHIM_OK, CSP_SHIM_EINVAL or CSP_SHIM_EALREADY. */
int32_t shim_init(const csp_shim_host_env_t *env, const csp_shim_config_t *cfg);

/* Same signature as the function it replaces. `iface` is not dereferenced.
 * `task_woken`, when non-NULL, is set to 0. */
int32_t csp_can2_rx(void *iface, uint32_t id, const uint8_t *data, uint8_t dlc, int *task_woken);

#ifdef __cplusplus
}
#endif

#endif /* CSP_SHIM_H */
