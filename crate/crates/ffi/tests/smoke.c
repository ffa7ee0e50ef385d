#include <stdio.h>
#include "hybrid_auction.h"

int main(void) {
    const double ctrs[] = {0.5};
    const double alphas[] = {1.0, 1.0};
    const uint8_t adjacency[] = {0, 1, 0, 0};
    const double bids[] = {0.3, 0.6, 0.2, 0.4};
    double alloc[4], pay[4];
    HaSetting *setting = NULL;
    HaInstance *instance = NULL;
    if (ha_setting_new(2, 2, 1, ctrs, 1, &setting) != HA_STATUS_OK) return 1;
    if (ha_instance_new(alphas, 2, adjacency, 2, &instance) != HA_STATUS_OK) return 1;
    if (ha_vcg_run(setting, instance, bids, 4, alloc, 4, pay, 4) != HA_STATUS_OK) {
        char msg[256];
        ha_last_error(msg, sizeof msg);
        fprintf(stderr, "%s\n", msg);
        return 1;
    }
    printf("alloc %g %g %g %g revenue %f\n", alloc[0], alloc[1], alloc[2], alloc[3], pay[0] + pay[1] + pay[2] + pay[3]);
    if (ha_vcg_run(NULL, instance, bids, 4, alloc, 4, pay, 4) != HA_STATUS_NULL_POINTER) return 1;
    ha_instance_free(instance);
    ha_setting_free(setting);
    return 0;
}
