"""Networks, entity tables, the coupled model and its checkpoints"""
