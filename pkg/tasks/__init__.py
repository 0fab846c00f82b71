# Episode sources and samplers
