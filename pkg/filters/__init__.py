# Classical approximate-membership filters
