from msgtl.engine import StageNetwork
from msgtl.topology import width_schedule
from msgtl.transfer import init_network, transfer_weights


def masked_net(rng, n_prev=None, n=None, gamma=2, omega=5, rho=0.5, shared=False,
               perturb=True) -> StageNetwork:
    """Random network with a transferred block and live values off their snapshots."""
    n_prev = n_prev or int(rng.integers(1, 6))
    n = n or n_prev + int(rng.integers(0, 6))
    prev = init_network(width_schedule(n_prev, gamma, omega), rng)
    for layer in prev.layers:
        layer.b[...] = rng.normal(0, 0.3, layer.b.shape)
    nxt = init_network(width_schedule(n, gamma, omega), rng)
    net, _ = transfer_weights(prev, nxt, rho, shared, rng)
    if perturb:
        for layer in net.layers:
            layer.W += rng.normal(0, 0.2, layer.W.shape)
            layer.b += rng.normal(0, 0.2, layer.b.shape)
    return net
